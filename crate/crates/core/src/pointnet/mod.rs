//! PointNet layer graphs, weights, quantization and lowering to accelerator programs.

mod compile;
mod graph;
mod reference;
mod weights;

pub use compile::{compile, run_compiled, SCORES};
pub use graph::{
    apply_tnet, build_network, build_network_with_dims, Layer, LayerKind, NetworkDims, NetworkGraph, NetworkKind,
    NodeRef, OpCount, DEFAULT_NUM_CLASSES, DEFAULT_NUM_SEG_CLASSES,
};
pub use reference::{
    forward, run_reference_float, run_reference_quantized, Evaluator, FloatEvaluator, NetworkOutput,
    QuantizedEvaluator,
};
pub use weights::{quantize_network, ACTIVATION_CLIP_FRACTION, FoldedWeights, LayerParams, QuantLayer, QuantizedNetwork, WeightSet};
