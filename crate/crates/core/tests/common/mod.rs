#![allow(dead_code)]

use pnacc_core::fixq::BnParams;
use pnacc_core::matrix::RealMatrix;
use pnacc_core::pointnet::{LayerParams, NetworkGraph, WeightSet};
use rand::Rng;

/// He-uniform weights, small biases and random batch-norm statistics.
/// T-Net output layers are damped so transforms stay near the identity.
pub fn random_weights<R: Rng>(g: &NetworkGraph, rng: &mut R) -> WeightSet {
    let mut ws = WeightSet::zeros(g);
    for l in g.weighted_layers() {
        let mut a = (6.0 / l.in_dim as f64).sqrt();
        if l.name.starts_with("stn") && l.out_dim == l.name_dim() {
            a *= 0.05;
        }
        let data = (0..l.in_dim * l.out_dim).map(|_| rng.gen_range(-a..a)).collect();
        let weight = RealMatrix::from_vec(l.in_dim, l.out_dim, data).unwrap();
        let bias = (0..l.out_dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let bn = l.batch_norm.then(|| {
            let c = l.out_dim;
            BnParams {
                gamma: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
                beta: (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                running_mean: (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                running_var: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
                epsilon: 1e-5,
            }
        });
        ws.layers.insert(l.name.clone(), LayerParams { weight, bias, bn });
    }
    ws
}

pub fn random_points<R: Rng>(n: usize, rng: &mut R) -> RealMatrix {
    RealMatrix::from_vec(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

trait TnetDim {
    fn name_dim(&self) -> usize;
}

impl TnetDim for pnacc_core::pointnet::Layer {
    /// `M²` for a layer named `stnM.*`, zero otherwise.
    fn name_dim(&self) -> usize {
        self.name
            .strip_prefix("stn")
            .and_then(|s| s.split('.').next())
            .and_then(|m| m.parse::<usize>().ok())
            .map_or(0, |m| m * m)
    }
}
