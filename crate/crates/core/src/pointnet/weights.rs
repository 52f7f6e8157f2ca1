use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{LayerKind, NetworkGraph, NodeRef};
use super::reference::{forward, FloatEvaluator};
use crate::error::{CoreError, Result};
use crate::fixq::{choose_frac_bits, fold_batchnorm, quantize, BnParams, FixedFormat, QTensor};
use crate::matrix::RealMatrix;

/// Trained parameters of one dense layer; `weight` is `in×out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: RealMatrix,
    pub bias: Vec<f64>,
    pub bn: Option<BnParams>,
}

/// Float parameters keyed by layer name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub layers: BTreeMap<String, LayerParams>,
}

impl WeightSet {
    pub fn zeros(graph: &NetworkGraph) -> Self {
        let layers = graph
            .weighted_layers()
            .map(|l| {
                let p = LayerParams {
                    weight: RealMatrix::zeros(l.in_dim, l.out_dim),
                    bias: vec![0.0; l.out_dim],
                    bn: None,
                };
                (l.name.clone(), p)
            })
            .collect();
        WeightSet { layers }
    }

    /// Every weighted layer of `graph` must be present with matching dimensions.
    pub fn check(&self, graph: &NetworkGraph) -> Result<()> {
        for l in graph.weighted_layers() {
            let p = self
                .layers
                .get(&l.name)
                .ok_or_else(|| CoreError::Binding(format!("missing weights for layer `{}`", l.name)))?;
            if p.weight.rows() != l.in_dim || p.weight.cols() != l.out_dim || p.bias.len() != l.out_dim {
                return Err(CoreError::Binding(format!(
                    "layer `{}` expects {}x{} weights, got {}x{} with {} biases",
                    l.name,
                    l.in_dim,
                    l.out_dim,
                    p.weight.rows(),
                    p.weight.cols(),
                    p.bias.len()
                )));
            }
            if let Some(bn) = &p.bn {
                if bn.channels() != l.out_dim {
                    return Err(CoreError::Binding(format!("layer `{}` batch-norm width mismatch", l.name)));
                }
            }
        }
        Ok(())
    }

    /// Fold batch normalization into each layer and the T-Net identity into the
    /// bias of the layer producing each transform.
    pub fn fold(&self, graph: &NetworkGraph) -> Result<FoldedWeights> {
        self.check(graph)?;
        let mut layers = BTreeMap::new();
        for l in graph.weighted_layers() {
            let p = &self.layers[&l.name];
            let (w, b) = match &p.bn {
                Some(bn) => fold_batchnorm(&p.weight, &p.bias, bn)?,
                None => (p.weight.clone(), p.bias.clone()),
            };
            layers.insert(l.name.clone(), (w, b));
        }
        for l in graph.layers.iter().filter(|l| l.kind == LayerKind::TransformApply) {
            if let NodeRef::Node(t) = l.inputs[1] {
                let (_, bias) = layers.get_mut(&graph.layers[t].name).expect("transform producer has weights");
                for i in 0..l.in_dim {
                    bias[i * l.in_dim + i] += 1.0;
                }
            }
        }
        Ok(FoldedWeights { layers })
    }
}

/// Inference-time float parameters: batch-norm folded, transform identity folded.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedWeights {
    pub layers: BTreeMap<String, (RealMatrix, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantLayer {
    pub weight: QTensor,
    /// Folded bias in real units; converted to accumulator codes at compile time.
    pub bias: Vec<f64>,
}

/// Quantized parameters plus the fixed-point format of every node's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedNetwork {
    pub bits: u8,
    pub input_fmt: FixedFormat,
    pub layers: BTreeMap<String, QuantLayer>,
    /// Output format keyed by layer name.
    pub activations: BTreeMap<String, FixedFormat>,
}

impl QuantizedNetwork {
    pub fn fmt_of(&self, graph: &NetworkGraph, r: NodeRef) -> FixedFormat {
        match r {
            NodeRef::Input => self.input_fmt,
            NodeRef::Node(i) => self.activations[&graph.layers[i].name],
        }
    }

    pub fn check(&self, graph: &NetworkGraph) -> Result<()> {
        for l in &graph.layers {
            if !self.activations.contains_key(&l.name) {
                return Err(CoreError::Binding(format!("no activation format for layer `{}`", l.name)));
            }
            if !l.has_weights() {
                continue;
            }
            let q = self
                .layers
                .get(&l.name)
                .ok_or_else(|| CoreError::Binding(format!("missing quantized weights for `{}`", l.name)))?;
            if q.weight.dims() != [l.in_dim, l.out_dim] || q.bias.len() != l.out_dim {
                return Err(CoreError::Binding(format!(
                    "layer `{}` expects {}x{} weights, got {:?}",
                    l.name,
                    l.in_dim,
                    l.out_dim,
                    q.weight.dims()
                )));
            }
            if q.weight.fmt().total_bits() != self.bits {
                return Err(CoreError::Binding(format!("layer `{}` is not {}-bit", l.name, self.bits)));
            }
        }
        for l in &graph.layers {
            let shift = self.shift_of(graph, l);
            if shift < 0 {
                return Err(CoreError::Config(format!("layer `{}` needs negative shift {shift}", l.name)));
            }
        }
        Ok(())
    }

    /// Frac bits of the operand multiplied against the layer input.
    fn operand_frac(&self, graph: &NetworkGraph, l: &super::graph::Layer) -> Option<i32> {
        match l.kind {
            LayerKind::SharedMlp | LayerKind::Fc => Some(self.layers[&l.name].weight.fmt().frac_bits() as i32),
            LayerKind::TransformApply => Some(self.fmt_of(graph, l.inputs[1]).frac_bits() as i32),
            _ => None,
        }
    }

    /// Requantization shift `frac(in) + frac(weight) − frac(out)`; zero for layers without a product.
    pub fn shift_of(&self, graph: &NetworkGraph, l: &super::graph::Layer) -> i32 {
        match self.operand_frac(graph, l) {
            Some(wf) => {
                self.fmt_of(graph, l.inputs[0]).frac_bits() as i32 + wf - self.activations[&l.name].frac_bits() as i32
            }
            None => 0,
        }
    }

    /// Bias of a dense layer as first-stage accumulator codes.
    pub fn bias_codes(&self, graph: &NetworkGraph, layer: &str) -> Result<Vec<i64>> {
        let idx = graph
            .index_of(layer)
            .ok_or_else(|| CoreError::Binding(format!("unknown layer `{layer}`")))?;
        let l = &graph.layers[idx];
        let q = &self.layers[layer];
        let scale = (self.fmt_of(graph, l.inputs[0]).frac_bits() as i32 + q.weight.fmt().frac_bits() as i32) as f64;
        Ok(q.bias.iter().map(|b| (b * scale.exp2()).round() as i64).collect())
    }
}

/// Activations are calibrated to their full observed range. Max-pooling keeps
/// exactly the upper tail that a clipping budget would cut off.
pub const ACTIVATION_CLIP_FRACTION: f64 = 0.0;

/// Quantize a trained network to `bits` (8 or 16).
///
/// Weights get per-tensor formats from their own values, clipping at most
/// `clip_fraction` of them. Activation formats come from float runs over
/// `calibration` clouds, or the width's default format when no calibration
/// data is given. Formats are then lowered where
/// needed so every shift is non-negative and both halves of a concatenation
/// share one format.
pub fn quantize_network(
    graph: &NetworkGraph,
    weights: &WeightSet,
    calibration: &[RealMatrix],
    bits: u8,
    clip_fraction: f64,
) -> Result<QuantizedNetwork> {
    let folded = weights.fold(graph)?;
    let default = FixedFormat::default_for_bits(bits)?;

    let mut layers = BTreeMap::new();
    for l in graph.weighted_layers() {
        let (w, b) = &folded.layers[&l.name];
        let fmt = choose_frac_bits(w.data(), bits, clip_fraction)?;
        let weight = quantize(w.data(), &[w.rows(), w.cols()], fmt)?;
        layers.insert(l.name.clone(), QuantLayer { weight, bias: b.clone() });
    }

    let mut input_fmt = default;
    let mut activations: BTreeMap<String, FixedFormat> =
        graph.layers.iter().map(|l| (l.name.clone(), default)).collect();
    if !calibration.is_empty() {
        let eval = FloatEvaluator::new(&folded);
        let mut samples: Vec<Vec<f64>> = vec![Vec::new(); graph.layers.len()];
        let mut inputs = Vec::new();
        for cloud in calibration {
            inputs.extend_from_slice(cloud.data());
            for (i, out) in forward(graph, &eval, cloud)?.into_iter().enumerate() {
                samples[i].extend_from_slice(out.data());
            }
        }
        input_fmt = choose_frac_bits(&inputs, bits, ACTIVATION_CLIP_FRACTION)?;
        for (l, s) in graph.layers.iter().zip(&samples) {
            activations.insert(l.name.clone(), choose_frac_bits(s, bits, ACTIVATION_CLIP_FRACTION)?);
        }
    }

    let mut net = QuantizedNetwork { bits, input_fmt, layers, activations };
    settle_formats(graph, &mut net)?;
    net.check(graph)?;
    Ok(net)
}

/// Lower output formats until pass-through layers inherit their input format,
/// concatenated inputs agree, and no shift is negative.
fn settle_formats(graph: &NetworkGraph, net: &mut QuantizedNetwork) -> Result<()> {
    for _ in 0..4 * graph.layers.len() + 4 {
        let mut changed = false;
        for l in &graph.layers {
            let cur = net.activations[&l.name];
            let target = match l.kind {
                LayerKind::MaxPool => net.fmt_of(graph, l.inputs[0]),
                LayerKind::Concat => {
                    let a = net.fmt_of(graph, l.inputs[0]);
                    let b = net.fmt_of(graph, l.inputs[1]);
                    let low = if a.frac_bits() <= b.frac_bits() { a } else { b };
                    for &r in &l.inputs {
                        changed |= lower_to(graph, net, r, low);
                    }
                    low
                }
                _ => {
                    let shift = net.shift_of(graph, l);
                    if shift < 0 {
                        cur.with_frac_bits((cur.frac_bits() as i32 + shift) as u8)?
                    } else {
                        cur
                    }
                }
            };
            if target != cur {
                net.activations.insert(l.name.clone(), target);
                changed = true;
            }
        }
        if !changed {
            return Ok(());
        }
    }
    Err(CoreError::Config("activation formats did not settle".into()))
}

/// Set node `r` (and, through max-pools, the layer feeding it) to `fmt` if it is finer.
fn lower_to(graph: &NetworkGraph, net: &mut QuantizedNetwork, r: NodeRef, fmt: FixedFormat) -> bool {
    match r {
        NodeRef::Input => {
            if net.input_fmt.frac_bits() > fmt.frac_bits() {
                net.input_fmt = fmt;
                return true;
            }
            false
        }
        NodeRef::Node(i) => {
            let l = &graph.layers[i];
            let mut changed = false;
            if net.activations[&l.name].frac_bits() > fmt.frac_bits() {
                net.activations.insert(l.name.clone(), fmt);
                changed = true;
            }
            if l.kind == LayerKind::MaxPool {
                changed |= lower_to(graph, net, l.inputs[0], fmt);
            }
            changed
        }
    }
}
