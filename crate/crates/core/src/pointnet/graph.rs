use serde::{Deserialize, Serialize};

use crate::accel::MAX_POINTS;
use crate::error::{CoreError, Result};
use crate::tile_mm::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NetworkKind {
    /// Classification without input/feature transforms.
    VanillaCls,
    FullCls,
    FullSeg,
}

impl NetworkKind {
    pub fn is_segmentation(self) -> bool {
        self == NetworkKind::FullSeg
    }

    pub fn has_transforms(self) -> bool {
        self != NetworkKind::VanillaCls
    }
}

impl std::str::FromStr for NetworkKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla-cls" | "vanilla" => Ok(NetworkKind::VanillaCls),
            "cls" | "full-cls" => Ok(NetworkKind::FullCls),
            "seg" | "full-seg" => Ok(NetworkKind::FullSeg),
            other => Err(CoreError::UnknownStrategy { kind: "network", name: other.to_string() }),
        }
    }
}

impl std::fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NetworkKind::VanillaCls => "vanilla-cls",
            NetworkKind::FullCls => "cls",
            NetworkKind::FullSeg => "seg",
        })
    }
}

/// Layer widths. [`NetworkDims::canonical`] is the published PointNet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDims {
    /// Shared MLP before the feature transform; its last width is the feature-transform size.
    pub backbone1: Vec<usize>,
    /// Shared MLP after the feature transform; its last width is the global feature size.
    pub backbone2: Vec<usize>,
    pub tnet_mlp: Vec<usize>,
    pub tnet_fc: Vec<usize>,
    pub cls_fc: Vec<usize>,
    pub seg_mlp: Vec<usize>,
}

impl NetworkDims {
    pub fn canonical() -> Self {
        NetworkDims {
            backbone1: vec![64, 64],
            backbone2: vec![64, 128, 1024],
            tnet_mlp: vec![64, 128, 1024],
            tnet_fc: vec![512, 256],
            cls_fc: vec![512, 256],
            seg_mlp: vec![512, 256, 128],
        }
    }

    /// Same topology with narrow layers, for fast randomized testing.
    pub fn small() -> Self {
        NetworkDims {
            backbone1: vec![16, 16],
            backbone2: vec![16, 32, 64],
            tnet_mlp: vec![16, 32, 64],
            tnet_fc: vec![32, 16],
            cls_fc: vec![32, 16],
            seg_mlp: vec![32, 16, 16],
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("backbone1", &self.backbone1),
            ("backbone2", &self.backbone2),
            ("tnet_mlp", &self.tnet_mlp),
            ("tnet_fc", &self.tnet_fc),
            ("cls_fc", &self.cls_fc),
            ("seg_mlp", &self.seg_mlp),
        ] {
            if v.is_empty() || v.contains(&0) {
                return Err(CoreError::Config(format!("{name} widths must be non-empty and positive")));
            }
        }
        Ok(())
    }
}

impl Default for NetworkDims {
    fn default() -> Self {
        Self::canonical()
    }
}

/// Index of a node's producer; `NodeRef::Input` is the `n×3` point matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeRef {
    Input,
    Node(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Per-point dense layer (a 1×1 convolution): `n×in → n×out`.
    SharedMlp,
    /// Dense layer on a pooled `1×in` vector.
    Fc,
    /// Column-wise max over points: `n×d → 1×d`.
    MaxPool,
    /// `X · (T + I)` where `X` is `n×M` (first input) and `T` is the `1×M²` T-Net output (second input).
    TransformApply,
    /// Per-point features (first input) beside the global feature broadcast to every point (second input).
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeRef>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Whether the trained layer carries batch normalization (folded before quantization).
    pub batch_norm: bool,
}

impl Layer {
    pub fn has_weights(&self) -> bool {
        matches!(self.kind, LayerKind::SharedMlp | LayerKind::Fc)
    }

    /// Whether the output has one row per point (`n`) rather than one row.
    pub fn per_point(&self) -> bool {
        !matches!(self.kind, LayerKind::Fc | LayerKind::MaxPool)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub kind: NetworkKind,
    pub n_points: usize,
    pub num_classes: usize,
    pub num_seg_classes: usize,
    pub dims: NetworkDims,
    pub layers: Vec<Layer>,
}

pub const DEFAULT_NUM_CLASSES: usize = 40;
pub const DEFAULT_NUM_SEG_CLASSES: usize = 50;

struct Builder {
    layers: Vec<Layer>,
    n_points: usize,
}

impl Builder {
    fn push(&mut self, layer: Layer) -> NodeRef {
        self.layers.push(layer);
        NodeRef::Node(self.layers.len() - 1)
    }

    fn dim_of(&self, r: NodeRef) -> usize {
        match r {
            NodeRef::Input => 3,
            NodeRef::Node(i) => self.layers[i].out_dim,
        }
    }

    fn dense(&mut self, name: &str, kind: LayerKind, input: NodeRef, out: usize, relu: bool) -> NodeRef {
        let in_dim = self.dim_of(input);
        self.push(Layer {
            name: name.to_string(),
            kind,
            inputs: vec![input],
            in_dim,
            out_dim: out,
            activation: if relu { Activation::Relu } else { Activation::None },
            batch_norm: relu,
        })
    }

    fn pool(&mut self, name: &str, input: NodeRef) -> NodeRef {
        let d = self.dim_of(input);
        self.push(Layer {
            name: name.to_string(),
            kind: LayerKind::MaxPool,
            inputs: vec![input],
            in_dim: d,
            out_dim: d,
            activation: Activation::None,
            batch_norm: false,
        })
    }

    /// T-Net predicting an `m×m` transform from `x`, then applying it to `x`.
    fn tnet(&mut self, prefix: &str, x: NodeRef, dims: &NetworkDims) -> NodeRef {
        let m = self.dim_of(x);
        let mut h = x;
        for (i, &w) in dims.tnet_mlp.iter().enumerate() {
            h = self.dense(&format!("{prefix}.conv{}", i + 1), LayerKind::SharedMlp, h, w, true);
        }
        h = self.pool(&format!("{prefix}.pool"), h);
        for (i, &w) in dims.tnet_fc.iter().enumerate() {
            h = self.dense(&format!("{prefix}.fc{}", i + 1), LayerKind::Fc, h, w, true);
        }
        let t = self.dense(&format!("{prefix}.fc{}", dims.tnet_fc.len() + 1), LayerKind::Fc, h, m * m, false);
        self.push(Layer {
            name: format!("{prefix}.apply"),
            kind: LayerKind::TransformApply,
            inputs: vec![x, t],
            in_dim: m,
            out_dim: m,
            activation: Activation::None,
            batch_norm: false,
        })
    }
}

/// Canonical PointNet graph.
pub fn build_network(kind: NetworkKind, n: usize, k: usize, m: usize) -> Result<NetworkGraph> {
    build_network_with_dims(kind, n, k, m, NetworkDims::canonical())
}

pub fn build_network_with_dims(
    kind: NetworkKind,
    n: usize,
    k: usize,
    m: usize,
    dims: NetworkDims,
) -> Result<NetworkGraph> {
    if n == 0 || n > MAX_POINTS {
        return Err(CoreError::Capacity(format!(
            "{n} points requested; the accelerator supports 1 to {MAX_POINTS}"
        )));
    }
    if k == 0 || (kind.is_segmentation() && m == 0) {
        return Err(CoreError::Config("class counts must be positive".into()));
    }
    dims.validate()?;
    let mut b = Builder { layers: Vec::new(), n_points: n };
    let mut h = NodeRef::Input;
    if kind.has_transforms() {
        h = b.tnet("stn3", h, &dims);
    }
    let mut idx = 1;
    for &w in &dims.backbone1 {
        h = b.dense(&format!("feat.conv{idx}"), LayerKind::SharedMlp, h, w, true);
        idx += 1;
    }
    if kind.has_transforms() {
        let m_feat = b.dim_of(h);
        h = b.tnet(&format!("stn{m_feat}"), h, &dims);
    }
    let point_feature = h;
    for &w in &dims.backbone2 {
        h = b.dense(&format!("feat.conv{idx}"), LayerKind::SharedMlp, h, w, true);
        idx += 1;
    }
    let global = b.pool("feat.pool", h);

    if kind.is_segmentation() {
        let (pf, gf) = (b.dim_of(point_feature), b.dim_of(global));
        let mut h = b.push(Layer {
            name: "seg.concat".into(),
            kind: LayerKind::Concat,
            inputs: vec![point_feature, global],
            in_dim: pf + gf,
            out_dim: pf + gf,
            activation: Activation::None,
            batch_norm: false,
        });
        for (i, &w) in dims.seg_mlp.iter().enumerate() {
            h = b.dense(&format!("seg.conv{}", i + 1), LayerKind::SharedMlp, h, w, true);
        }
        b.dense(&format!("seg.conv{}", dims.seg_mlp.len() + 1), LayerKind::SharedMlp, h, m, false);
    } else {
        let mut h = global;
        for (i, &w) in dims.cls_fc.iter().enumerate() {
            h = b.dense(&format!("cls.fc{}", i + 1), LayerKind::Fc, h, w, true);
        }
        b.dense(&format!("cls.fc{}", dims.cls_fc.len() + 1), LayerKind::Fc, h, k, false);
    }

    let graph = NetworkGraph {
        kind,
        n_points: b.n_points,
        num_classes: k,
        num_seg_classes: if kind.is_segmentation() { m } else { 0 },
        dims,
        layers: b.layers,
    };
    graph.validate()?;
    Ok(graph)
}

/// Multiply-accumulate and operation counts (one MAC is two operations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub macs: u64,
    pub ops: u64,
}

impl NetworkGraph {
    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn dim_of(&self, r: NodeRef) -> usize {
        match r {
            NodeRef::Input => 3,
            NodeRef::Node(i) => self.layers[i].out_dim,
        }
    }

    pub fn rows_of(&self, r: NodeRef) -> usize {
        match r {
            NodeRef::Input => self.n_points,
            NodeRef::Node(i) if self.layers[i].per_point() => self.n_points,
            NodeRef::Node(_) => 1,
        }
    }

    /// Consumers of node `r`, with the input slot they read it through.
    pub fn consumers(&self, r: NodeRef) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (slot, &inp) in l.inputs.iter().enumerate() {
                if inp == r {
                    out.push((i, slot));
                }
            }
        }
        out
    }

    pub fn weighted_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| l.has_weights())
    }

    pub fn output_node(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn count_ops(&self) -> OpCount {
        let n = self.n_points as u64;
        let macs = self
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::SharedMlp | LayerKind::TransformApply => n * (l.in_dim * l.out_dim) as u64,
                LayerKind::Fc => (l.in_dim * l.out_dim) as u64,
                LayerKind::MaxPool | LayerKind::Concat => 0,
            })
            .sum();
        OpCount { macs, ops: 2 * macs }
    }

    pub fn count_transforms(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::TransformApply)
            .map(|l| l.in_dim)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(msg));
        for (i, l) in self.layers.iter().enumerate() {
            for inp in &l.inputs {
                if let NodeRef::Node(j) = inp {
                    if *j >= i {
                        return bad(format!("layer {} reads a later layer", l.name));
                    }
                }
            }
            let dims: Vec<usize> = l.inputs.iter().map(|&r| self.dim_of(r)).collect();
            let rows: Vec<usize> = l.inputs.iter().map(|&r| self.rows_of(r)).collect();
            let ok = match l.kind {
                LayerKind::SharedMlp => dims == [l.in_dim] && rows == [self.n_points],
                LayerKind::Fc => dims == [l.in_dim] && rows == [1],
                LayerKind::MaxPool => dims == [l.in_dim] && l.in_dim == l.out_dim,
                LayerKind::TransformApply => {
                    dims == [l.in_dim, l.in_dim * l.in_dim] && l.in_dim == l.out_dim && rows == [self.n_points, 1]
                }
                LayerKind::Concat => {
                    dims.len() == 2 && dims[0] + dims[1] == l.out_dim && rows == [self.n_points, 1]
                }
            };
            if !ok {
                return bad(format!("layer {} has inconsistent dimensions", l.name));
            }
        }
        let transforms = self.count_transforms();
        let expected: Vec<usize> = if self.kind.has_transforms() {
            vec![3, *self.dims.backbone1.last().unwrap()]
        } else {
            vec![]
        };
        if transforms != expected {
            return bad(format!("expected transforms {expected:?}, found {transforms:?}"));
        }
        let global_pools = self.layers.iter().filter(|l| l.name == "feat.pool").count();
        if global_pools != 1 {
            return bad("exactly one global max-pool is required".into());
        }
        Ok(())
    }
}

/// `X · (T + I)` for an `n×M` matrix and an `M×M` transform.
pub fn apply_tnet(x: &crate::matrix::RealMatrix, t: &crate::matrix::RealMatrix) -> Result<crate::matrix::RealMatrix> {
    if t.rows() != t.cols() || x.cols() != t.rows() {
        return Err(CoreError::Shape(format!(
            "cannot apply a {}x{} transform to {} columns",
            t.rows(),
            t.cols(),
            x.cols()
        )));
    }
    let mut shifted = t.clone();
    for i in 0..t.rows() {
        shifted[(i, i)] += 1.0;
    }
    x.matmul(&shifted)
}
