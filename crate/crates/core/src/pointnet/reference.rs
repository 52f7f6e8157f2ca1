//! Graph interpreters used as oracles for the compiled accelerator programs.
//!
//! [`forward`] walks the layer graph once; an [`Evaluator`] decides the
//! arithmetic. [`FloatEvaluator`] is the double-precision model.
//! [`QuantizedEvaluator`] does the same float arithmetic on dequantized codes
//! and rounds every layer output to its fixed-point format, which reproduces
//! the integer datapath exactly as long as no accumulator wraps.

use super::graph::{Layer, LayerKind, NetworkGraph, NodeRef};
use super::weights::{FoldedWeights, QuantizedNetwork, WeightSet};
use crate::error::{CoreError, Result};
use crate::fixq::{dequantize, quantize, FixedFormat};
use crate::matrix::RealMatrix;
use crate::tile_mm::Activation;

pub trait Evaluator {
    fn input(&self, points: &RealMatrix) -> Result<RealMatrix>;

    /// Dense layer including bias and activation.
    fn dense(&self, layer: &Layer, x: &RealMatrix) -> Result<RealMatrix>;

    /// `x` times the `M×M` matrix stored row-major in the `1×M²` vector `t`.
    fn transform(&self, layer: &Layer, x: &RealMatrix, t: &RealMatrix) -> Result<RealMatrix>;
}

/// Evaluate every node; element `i` of the result is the output of layer `i`.
pub fn forward<E: Evaluator>(graph: &NetworkGraph, eval: &E, points: &RealMatrix) -> Result<Vec<RealMatrix>> {
    if points.cols() != 3 || points.rows() == 0 {
        return Err(CoreError::Shape(format!(
            "expected an n×3 point matrix, got {}x{}",
            points.rows(),
            points.cols()
        )));
    }
    let input = eval.input(points)?;
    let mut outs: Vec<RealMatrix> = Vec::with_capacity(graph.layers.len());
    for l in &graph.layers {
        let get = |r: NodeRef| -> &RealMatrix {
            match r {
                NodeRef::Input => &input,
                NodeRef::Node(i) => &outs[i],
            }
        };
        let out = match l.kind {
            LayerKind::SharedMlp | LayerKind::Fc => eval.dense(l, get(l.inputs[0]))?,
            LayerKind::MaxPool => get(l.inputs[0]).max_columns()?,
            LayerKind::TransformApply => eval.transform(l, get(l.inputs[0]), get(l.inputs[1]))?,
            LayerKind::Concat => {
                let (pf, gf) = (get(l.inputs[0]), get(l.inputs[1]));
                let mut data = Vec::with_capacity(pf.rows() * l.out_dim);
                for i in 0..pf.rows() {
                    data.extend_from_slice(pf.row(i));
                    data.extend_from_slice(gf.row(0));
                }
                RealMatrix::from_vec(pf.rows(), l.out_dim, data)?
            }
        };
        outs.push(out);
    }
    Ok(outs)
}

fn activate(x: f64, act: Activation) -> f64 {
    match act {
        Activation::None => x,
        Activation::Relu => x.max(0.0),
        Activation::Relu6 => x.clamp(0.0, 6.0),
    }
}

fn reshape_transform(layer: &Layer, t: &RealMatrix) -> Result<RealMatrix> {
    let m = layer.in_dim;
    if t.rows() != 1 || t.cols() != m * m {
        return Err(CoreError::Shape(format!("transform for {} must be 1x{}", layer.name, m * m)));
    }
    RealMatrix::from_vec(m, m, t.data().to_vec())
}

pub struct FloatEvaluator<'a> {
    weights: &'a FoldedWeights,
}

impl<'a> FloatEvaluator<'a> {
    pub fn new(weights: &'a FoldedWeights) -> Self {
        FloatEvaluator { weights }
    }
}

impl Evaluator for FloatEvaluator<'_> {
    fn input(&self, points: &RealMatrix) -> Result<RealMatrix> {
        Ok(points.clone())
    }

    fn dense(&self, layer: &Layer, x: &RealMatrix) -> Result<RealMatrix> {
        let (w, b) = self
            .weights
            .layers
            .get(&layer.name)
            .ok_or_else(|| CoreError::Binding(format!("no weights for `{}`", layer.name)))?;
        let mut y = x.matmul(w)?;
        y.add_row_vector(b)?;
        y.map_inplace(|v| activate(v, layer.activation));
        Ok(y)
    }

    fn transform(&self, layer: &Layer, x: &RealMatrix, t: &RealMatrix) -> Result<RealMatrix> {
        // The identity is already part of `t` (folded into the producing bias).
        x.matmul(&reshape_transform(layer, t)?)
    }
}

pub struct QuantizedEvaluator<'a> {
    graph: &'a NetworkGraph,
    net: &'a QuantizedNetwork,
}

impl<'a> QuantizedEvaluator<'a> {
    pub fn new(graph: &'a NetworkGraph, net: &'a QuantizedNetwork) -> Self {
        QuantizedEvaluator { graph, net }
    }

    fn narrow(&self, values: Vec<f64>, rows: usize, cols: usize, fmt: FixedFormat, act: Activation) -> Result<RealMatrix> {
        let q = quantize(&values, &[rows, cols], fmt)?;
        let codes: Vec<i32> = q.codes().iter().map(|&c| act.apply_code(c, fmt)).collect();
        let q = crate::fixq::QTensor::new(vec![rows, cols], codes, fmt)?;
        RealMatrix::from_vec(rows, cols, dequantize(&q))
    }
}

impl Evaluator for QuantizedEvaluator<'_> {
    fn input(&self, points: &RealMatrix) -> Result<RealMatrix> {
        self.narrow(points.data().to_vec(), points.rows(), 3, self.net.input_fmt, Activation::None)
    }

    fn dense(&self, layer: &Layer, x: &RealMatrix) -> Result<RealMatrix> {
        let q = self
            .net
            .layers
            .get(&layer.name)
            .ok_or_else(|| CoreError::Binding(format!("no weights for `{}`", layer.name)))?;
        let w = RealMatrix::from_vec(layer.in_dim, layer.out_dim, dequantize(&q.weight))?;
        let in_frac = self.net.fmt_of(self.graph, layer.inputs[0]).frac_bits() as i32;
        let scale = (-(in_frac + q.weight.fmt().frac_bits() as i32) as f64).exp2();
        let bias: Vec<f64> = self
            .net
            .bias_codes(self.graph, &layer.name)?
            .into_iter()
            .map(|c| c as f64 * scale)
            .collect();
        let mut y = x.matmul(&w)?;
        y.add_row_vector(&bias)?;
        let fmt = self.net.activations[&layer.name];
        self.narrow(y.into_data(), x.rows(), layer.out_dim, fmt, layer.activation)
    }

    fn transform(&self, layer: &Layer, x: &RealMatrix, t: &RealMatrix) -> Result<RealMatrix> {
        let y = x.matmul(&reshape_transform(layer, t)?)?;
        let fmt = self.net.activations[&layer.name];
        self.narrow(y.into_data(), x.rows(), layer.out_dim, fmt, Activation::None)
    }
}

/// Final network output: `1×k` class scores or `n×m` per-point scores.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    pub scores: RealMatrix,
}

impl NetworkOutput {
    /// Index of the largest score in each row (first one on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.scores.rows())
            .map(|i| {
                let row = self.scores.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn class(&self) -> usize {
        self.argmax_rows()[0]
    }
}

/// Double-precision forward pass of the trained network.
pub fn run_reference_float(graph: &NetworkGraph, weights: &WeightSet, points: &RealMatrix) -> Result<NetworkOutput> {
    let folded = weights.fold(graph)?;
    let mut outs = forward(graph, &FloatEvaluator::new(&folded), points)?;
    Ok(NetworkOutput { scores: outs.pop().expect("graph has layers") })
}

/// Forward pass with every activation rounded to its quantized format.
pub fn run_reference_quantized(
    graph: &NetworkGraph,
    net: &QuantizedNetwork,
    points: &RealMatrix,
) -> Result<NetworkOutput> {
    net.check(graph)?;
    let mut outs = forward(graph, &QuantizedEvaluator::new(graph, net), points)?;
    Ok(NetworkOutput { scores: outs.pop().expect("graph has layers") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointnet::graph::{build_network_with_dims, NetworkDims, NetworkKind};
    use crate::pointnet::weights::LayerParams;

    #[test]
    fn zero_weights_give_zero_scores() {
        let g = build_network_with_dims(NetworkKind::FullCls, 5, 4, 0, NetworkDims::small()).unwrap();
        let pts = RealMatrix::from_vec(5, 3, (0..15).map(|i| i as f64 * 0.1).collect()).unwrap();
        let out = run_reference_float(&g, &WeightSet::zeros(&g), &pts).unwrap();
        assert_eq!(out.scores.data(), &[0.0; 4]);
    }

    #[test]
    fn rejects_wrong_point_width() {
        let g = build_network_with_dims(NetworkKind::VanillaCls, 5, 4, 0, NetworkDims::small()).unwrap();
        let pts = RealMatrix::zeros(5, 4);
        assert!(matches!(run_reference_float(&g, &WeightSet::zeros(&g), &pts), Err(CoreError::Shape(_))));
    }

    /// Vanilla network of width one everywhere: every layer computes `relu(w·x + b)`.
    #[test]
    fn hand_worked_single_point() {
        let dims = NetworkDims {
            backbone1: vec![1],
            backbone2: vec![1],
            tnet_mlp: vec![1],
            tnet_fc: vec![1],
            cls_fc: vec![1],
            seg_mlp: vec![1],
        };
        let g = build_network_with_dims(NetworkKind::VanillaCls, 1, 2, 0, dims).unwrap();
        let mut w = WeightSet::zeros(&g);
        let set = |w: &mut WeightSet, name: &str, weight: Vec<f64>, bias: Vec<f64>| {
            let p = w.layers.get_mut(name).unwrap();
            *p = LayerParams {
                weight: RealMatrix::from_vec(p.weight.rows(), p.weight.cols(), weight).unwrap(),
                bias,
                bn: None,
            };
        };
        // feat.conv1: 3 -> 1, x=(1,2,3): 1*1 + 2*(-1) + 3*0.5 + 0.25 = 0.75
        set(&mut w, "feat.conv1", vec![1.0, -1.0, 0.5], vec![0.25]);
        // feat.conv2: 2*0.75 - 0.5 = 1.0
        set(&mut w, "feat.conv2", vec![2.0], vec![-0.5]);
        // pool over one point: 1.0; cls.fc1: 3*1 - 4 = -1 -> relu 0
        set(&mut w, "cls.fc1", vec![3.0], vec![-4.0]);
        // cls.fc2: scores (0*1 + 0.5, 0*-1 - 0.5) = (0.5, -0.5)
        set(&mut w, "cls.fc2", vec![1.0, -1.0], vec![0.5, -0.5]);
        let pts = RealMatrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let out = run_reference_float(&g, &w, &pts).unwrap();
        assert_eq!(out.scores.data(), &[0.5, -0.5]);
        assert_eq!(out.class(), 0);
    }
}
