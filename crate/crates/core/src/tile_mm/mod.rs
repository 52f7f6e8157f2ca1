//! Block-partitioned integer matrix multiplication.
//!
//! The point loop (rows of the input feature map) is never unrolled. The
//! reduction axis is split into blocks of `m_unroll` (multipliers per PE)
//! and the output-channel axis into blocks of `n_unroll` (number of PEs).
//! Partial sums stay in a wide first-stage accumulator and are narrowed once
//! per output element, after which the activation and the optional column
//! max-pool are applied.

mod engine;

pub use engine::{
    EngineRegistry, MatmulEngine, ParallelTiledEngine, ReferenceEngine, TiledEngine,
    DEFAULT_ENGINE,
};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fixq::{checked_shift, FixedFormat, QTensor};

/// Partial unroll factors of the reduction (`m_unroll`) and output-channel (`n_unroll`) loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileConfig {
    m_unroll: usize,
    n_unroll: usize,
}

impl TileConfig {
    pub fn new(m_unroll: usize, n_unroll: usize) -> Result<Self> {
        if m_unroll == 0 || n_unroll == 0 {
            return Err(CoreError::Config(format!(
                "unroll factors must be positive, got {m_unroll}x{n_unroll}"
            )));
        }
        Ok(TileConfig { m_unroll, n_unroll })
    }

    pub fn m_unroll(&self) -> usize {
        self.m_unroll
    }

    pub fn n_unroll(&self) -> usize {
        self.n_unroll
    }

    pub fn k_tiles(&self, k: usize) -> usize {
        k.div_ceil(self.m_unroll)
    }

    pub fn c_tiles(&self, c: usize) -> usize {
        c.div_ceil(self.n_unroll)
    }
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig { m_unroll: 32, n_unroll: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum OutputOrientation {
    #[default]
    RowOriented,
    ColumnOriented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    None,
    Relu,
    Relu6,
}

impl Activation {
    pub fn apply_code(self, code: i32, fmt: FixedFormat) -> i32 {
        match self {
            Activation::None => code,
            Activation::Relu => code.max(0),
            Activation::Relu6 => {
                let six = 6i64 << fmt.frac_bits();
                (code.max(0) as i64).min(six).min(fmt.max_code()) as i32
            }
        }
    }
}

/// One PE-array pass: point `point`, reduction block `k_tile`, channel block `c_tile`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileVisit {
    pub point: usize,
    pub k_tile: usize,
    pub c_tile: usize,
}

/// Everything one matrix multiplication needs besides the operands.
#[derive(Debug, Clone)]
pub struct MatmulJob<'a> {
    pub input: &'a QTensor,
    pub weight: &'a QTensor,
    /// First-stage bias, already scaled to `frac(input) + frac(weight)`.
    pub bias: &'a [i64],
    pub tile: TileConfig,
    pub orientation: OutputOrientation,
    pub activation: Activation,
    pub shift: i32,
    pub out_fmt: FixedFormat,
    /// Reduce the output to its column-wise maximum.
    pub max_pool: bool,
    pub record_trace: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatmulOutput {
    pub tensor: QTensor,
    pub saturations: usize,
    pub trace: Option<Vec<TileVisit>>,
}

/// Operand shapes after validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct JobShape {
    pub rows: usize,
    pub k: usize,
    pub c: usize,
    pub shift: u32,
    pub acc_bits: u32,
}

impl MatmulJob<'_> {
    pub(crate) fn validate(&self) -> Result<JobShape> {
        let (rows, k) = self.input.matrix_dims()?;
        let (wk, c) = self.weight.matrix_dims()?;
        if k != wk {
            return Err(CoreError::Shape(format!(
                "inner dimensions differ: input {rows}x{k}, weight {wk}x{c}"
            )));
        }
        if self.bias.len() != c {
            return Err(CoreError::Shape(format!(
                "bias has {} entries for {c} output channels",
                self.bias.len()
            )));
        }
        if self.max_pool && self.orientation != OutputOrientation::ColumnOriented {
            return Err(CoreError::Config("fused max-pool requires column-oriented output".into()));
        }
        let shift = checked_shift(self.shift)?;
        let bits = self.input.fmt().total_bits().max(self.weight.fmt().total_bits());
        Ok(JobShape { rows, k, c, shift, acc_bits: crate::fixq::accumulator_bits(bits) })
    }
}

/// Tiled matmul with requantization and activation on the default engine.
#[allow(clippy::too_many_arguments)]
pub fn matmul_tiled(
    a: &QTensor,
    w: &QTensor,
    bias: &[i64],
    cfg: TileConfig,
    orient: OutputOrientation,
    act: Activation,
    shift: i32,
    out_fmt: FixedFormat,
) -> Result<QTensor> {
    let job = MatmulJob {
        input: a,
        weight: w,
        bias,
        tile: cfg,
        orientation: orient,
        activation: act,
        shift,
        out_fmt,
        max_pool: false,
        record_trace: false,
    };
    Ok(TiledEngine.run(&job)?.tensor)
}

/// Matmul fused with a column-wise max-pool; output is `1×C`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_maxpool(
    a: &QTensor,
    w: &QTensor,
    bias: &[i64],
    cfg: TileConfig,
    act: Activation,
    shift: i32,
    out_fmt: FixedFormat,
) -> Result<QTensor> {
    let job = MatmulJob {
        input: a,
        weight: w,
        bias,
        tile: cfg,
        orientation: OutputOrientation::ColumnOriented,
        activation: act,
        shift,
        out_fmt,
        max_pool: true,
        record_trace: false,
    };
    Ok(TiledEngine.run(&job)?.tensor)
}

pub fn apply_activation(x: &[i32], act: Activation, fmt: FixedFormat) -> Vec<i32> {
    x.iter().map(|&c| act.apply_code(c, fmt)).collect()
}

pub fn max_columns(x: &QTensor) -> Result<QTensor> {
    let (rows, cols) = x.matrix_dims()?;
    if rows == 0 || cols == 0 {
        return Err(CoreError::Shape("max over an empty matrix".into()));
    }
    let codes = x.codes();
    let mut out = codes[..cols].to_vec();
    for row in codes.chunks(cols).skip(1) {
        for (m, &v) in out.iter_mut().zip(row) {
            *m = (*m).max(v);
        }
    }
    QTensor::new(vec![1, cols], out, x.fmt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q8(frac: u8) -> FixedFormat {
        FixedFormat::new(8, frac).unwrap()
    }

    fn mat(rows: usize, cols: usize, codes: Vec<i32>, fmt: FixedFormat) -> QTensor {
        QTensor::new(vec![rows, cols], codes, fmt).unwrap()
    }

    #[test]
    fn identity_weight_returns_input() {
        let fmt = q8(6);
        let a = mat(3, 4, vec![1, -2, 3, 4, 127, -128, 0, 5, 6, 7, -8, 9], fmt);
        let mut eye = vec![0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 64;
        }
        let w = mat(4, 4, eye, fmt);
        for orient in [OutputOrientation::RowOriented, OutputOrientation::ColumnOriented] {
            let out = matmul_tiled(&a, &w, &[0; 4], TileConfig::default(), orient, Activation::None, 6, fmt)
                .unwrap();
            assert_eq!(out.codes(), a.codes());
        }
    }

    #[test]
    fn scalar_product() {
        let a = mat(1, 1, vec![2], q8(0));
        let w = mat(1, 1, vec![3], q8(0));
        let out = matmul_tiled(&a, &w, &[0], TileConfig::default(), OutputOrientation::RowOriented, Activation::None, 0, q8(0))
            .unwrap();
        assert_eq!(out.codes(), &[6]);
    }

    #[test]
    fn dimension_and_shift_errors() {
        let a = mat(1, 2, vec![1, 1], q8(0));
        let w = mat(3, 1, vec![1, 1, 1], q8(0));
        let r = matmul_tiled(&a, &w, &[0], TileConfig::default(), OutputOrientation::RowOriented, Activation::None, 0, q8(0));
        assert!(matches!(r, Err(CoreError::Shape(_))));
        let w = mat(2, 1, vec![1, 1], q8(0));
        let r = matmul_tiled(&a, &w, &[0], TileConfig::default(), OutputOrientation::RowOriented, Activation::None, -1, q8(0));
        assert!(matches!(r, Err(CoreError::Config(_))));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(apply_activation(&[-5, 0, 7], Activation::Relu, q8(0)), vec![0, 0, 7]);
        assert_eq!(apply_activation(&[1000], Activation::Relu6, q8(6)), vec![127]);
        // Q8.4: six is code 96.
        assert_eq!(apply_activation(&[-3, 50, 100, 127], Activation::Relu6, q8(4)), vec![0, 50, 96, 96]);
        assert_eq!(apply_activation(&[-3, 4], Activation::None, q8(4)), vec![-3, 4]);
    }

    #[test]
    fn max_columns_examples() {
        let row = mat(1, 3, vec![4, -1, 9], q8(0));
        assert_eq!(max_columns(&row).unwrap().codes(), &[4, -1, 9]);
        let x = mat(3, 2, vec![5, -7, 1, -7, 3, -7], q8(0));
        assert_eq!(max_columns(&x).unwrap().codes(), &[5, -7]);
    }

    #[test]
    fn maxpool_single_row_matches_matmul() {
        let a = mat(1, 3, vec![10, -20, 30], q8(2));
        let w = mat(3, 2, vec![1, 2, 3, 4, 5, 6], q8(2));
        let bias = [7, -7];
        let cfg = TileConfig::new(2, 1).unwrap();
        let full = matmul_tiled(&a, &w, &bias, cfg, OutputOrientation::ColumnOriented, Activation::None, 2, q8(2)).unwrap();
        let pooled = matmul_maxpool(&a, &w, &bias, cfg, Activation::None, 2, q8(2)).unwrap();
        assert_eq!(full.codes(), pooled.codes());
    }

    #[test]
    fn maxpool_of_identity_is_column_max() {
        let fmt = q8(0);
        let a = mat(3, 2, vec![1, 9, 8, -2, 3, 4], fmt);
        let w = mat(2, 2, vec![1, 0, 0, 1], fmt);
        let out = matmul_maxpool(&a, &w, &[0, 0], TileConfig::default(), Activation::None, 0, fmt).unwrap();
        assert_eq!(out.codes(), &[8, 9]);
        assert_eq!(out.dims(), &[1, 2]);
    }

    #[test]
    fn unroll_factors_must_be_positive() {
        assert!(TileConfig::new(0, 4).is_err());
        assert!(TileConfig::new(4, 0).is_err());
        assert_eq!(TileConfig::default(), TileConfig::new(32, 32).unwrap());
    }
}
