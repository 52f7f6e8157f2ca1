//! Signed power-of-two fixed point (Q-format) arithmetic.
//!
//! Feature maps and weights are stored as 8- or 16-bit two's complement codes
//! with a per-tensor fractional bit count. Products are accumulated in a wide
//! wrapping accumulator (32 bits for 8-bit operands, 48 bits for 16-bit ones)
//! and narrowed exactly once by [`requantize`].

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::matrix::RealMatrix;

/// Fraction of calibration values allowed to clip when picking `frac_bits`.
pub const DEFAULT_CLIP_FRACTION: f64 = 0.001;

/// A signed Q-format: `total_bits` wide, `frac_bits` of them fractional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedFormat {
    total_bits: u8,
    frac_bits: u8,
}

impl FixedFormat {
    /// Default 8-bit feature/weight format.
    pub const Q8_4: FixedFormat = FixedFormat { total_bits: 8, frac_bits: 4 };
    /// Default 16-bit feature/weight format.
    pub const Q16_8: FixedFormat = FixedFormat { total_bits: 16, frac_bits: 8 };

    pub fn new(total_bits: u8, frac_bits: u8) -> Result<Self> {
        if total_bits != 8 && total_bits != 16 {
            return Err(CoreError::Format(format!(
                "total_bits must be 8 or 16, got {total_bits}"
            )));
        }
        if frac_bits >= total_bits {
            return Err(CoreError::Format(format!(
                "frac_bits {frac_bits} must be below total_bits {total_bits}"
            )));
        }
        Ok(FixedFormat { total_bits, frac_bits })
    }

    /// The default format for a bit width (Q8.4 or Q16.8).
    pub fn default_for_bits(total_bits: u8) -> Result<Self> {
        match total_bits {
            8 => Ok(Self::Q8_4),
            16 => Ok(Self::Q16_8),
            other => Err(CoreError::Format(format!("unsupported bit width {other}"))),
        }
    }

    pub fn total_bits(&self) -> u8 {
        self.total_bits
    }

    pub fn frac_bits(&self) -> u8 {
        self.frac_bits
    }

    pub fn with_frac_bits(&self, frac_bits: u8) -> Result<Self> {
        Self::new(self.total_bits, frac_bits)
    }

    pub fn min_code(&self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    /// Value of one code step.
    pub fn ulp(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn bytes(&self) -> usize {
        self.total_bits as usize / 8
    }

    /// First-stage accumulator width for operands of this format.
    pub fn accumulator_bits(&self) -> u32 {
        accumulator_bits(self.total_bits)
    }

    pub fn contains(&self, code: i64) -> bool {
        code >= self.min_code() && code <= self.max_code()
    }

    pub fn saturate(&self, code: i64) -> (i64, bool) {
        if code > self.max_code() {
            (self.max_code(), true)
        } else if code < self.min_code() {
            (self.min_code(), true)
        } else {
            (code, false)
        }
    }
}

impl std::fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Q{}.{}", self.total_bits, self.frac_bits)
    }
}

/// Accumulator width for a given operand width: 32 bits for INT8, 48 for INT16.
pub fn accumulator_bits(operand_bits: u8) -> u32 {
    if operand_bits <= 8 {
        32
    } else {
        48
    }
}

/// Reduce `value` modulo `2^bits` into the signed range of a `bits`-wide register.
pub fn wrap_to_width(value: i64, bits: u32) -> i64 {
    if bits >= 64 {
        return value;
    }
    let shift = 64 - bits;
    (value << shift) >> shift
}

/// Integer tensor with a fixed-point format, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QTensor {
    dims: Vec<usize>,
    codes: Vec<i32>,
    fmt: FixedFormat,
}

impl QTensor {
    pub fn new(dims: Vec<usize>, codes: Vec<i32>, fmt: FixedFormat) -> Result<Self> {
        if dims.contains(&0) {
            return Err(CoreError::Shape(format!("dims must be positive, got {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != codes.len() {
            return Err(CoreError::Shape(format!(
                "dims {dims:?} hold {len} elements but {} codes given",
                codes.len()
            )));
        }
        if let Some(bad) = codes.iter().find(|&&c| !fmt.contains(c as i64)) {
            return Err(CoreError::Format(format!("code {bad} outside {fmt}")));
        }
        Ok(QTensor { dims, codes, fmt })
    }

    pub fn zeros(dims: Vec<usize>, fmt: FixedFormat) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![0; len], fmt)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn fmt(&self) -> FixedFormat {
        self.fmt
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// `(rows, cols)` for a rank-2 tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(CoreError::Shape(format!("expected a matrix, got dims {other:?}"))),
        }
    }

    pub fn into_codes(self) -> Vec<i32> {
        self.codes
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.codes, self.fmt)
    }
}

/// Symmetric rounding of `v * 2^frac` to the nearest code, halves away from zero.
fn to_code(v: f64, fmt: FixedFormat) -> (i64, bool) {
    let scaled = (v * (fmt.frac_bits as f64).exp2()).round();
    if scaled >= fmt.max_code() as f64 {
        (fmt.max_code(), scaled > fmt.max_code() as f64)
    } else if scaled <= fmt.min_code() as f64 {
        (fmt.min_code(), scaled < fmt.min_code() as f64)
    } else {
        (scaled as i64, false)
    }
}

/// Quantize `values` into `fmt`, returning the tensor and the number of saturated elements.
pub fn quantize_with_stats(
    values: &[f64],
    dims: &[usize],
    fmt: FixedFormat,
) -> Result<(QTensor, usize)> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(CoreError::Format(format!("cannot quantize non-finite value {v}")));
    }
    let mut saturations = 0;
    let codes = values
        .iter()
        .map(|&v| {
            let (code, sat) = to_code(v, fmt);
            saturations += sat as usize;
            code as i32
        })
        .collect();
    Ok((QTensor::new(dims.to_vec(), codes, fmt)?, saturations))
}

pub fn quantize(values: &[f64], dims: &[usize], fmt: FixedFormat) -> Result<QTensor> {
    quantize_with_stats(values, dims, fmt).map(|(t, _)| t)
}

pub fn dequantize(qt: &QTensor) -> Vec<f64> {
    let ulp = qt.fmt.ulp();
    qt.codes.iter().map(|&c| c as f64 * ulp).collect()
}

/// Narrow one accumulator value: round `acc / 2^shift` half away from zero, then saturate.
pub fn requantize_value(acc: i64, shift: u32, out_fmt: FixedFormat) -> (i32, bool) {
    let acc = acc as i128;
    let rounded = if shift == 0 {
        acc
    } else {
        let half = 1i128 << (shift - 1);
        let mag = (acc.abs() + half) >> shift;
        if acc < 0 {
            -mag
        } else {
            mag
        }
    };
    let (code, sat) = if rounded > out_fmt.max_code() as i128 {
        (out_fmt.max_code(), true)
    } else if rounded < out_fmt.min_code() as i128 {
        (out_fmt.min_code(), true)
    } else {
        (rounded as i64, false)
    };
    (code as i32, sat)
}

/// Check and convert a signed requantization shift.
pub fn checked_shift(shift: i32) -> Result<u32> {
    u32::try_from(shift)
        .ok()
        .filter(|&s| s < 64)
        .ok_or_else(|| CoreError::Config(format!("requantization shift {shift} must be in [0, 64)")))
}

pub fn requantize(acc: &[i64], shift: i32, out_fmt: FixedFormat) -> Result<Vec<i32>> {
    let shift = checked_shift(shift)?;
    Ok(acc.iter().map(|&a| requantize_value(a, shift, out_fmt).0).collect())
}

/// Batch-normalization statistics for one layer's output channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
}

impl BnParams {
    /// The identity normalization over `channels` channels.
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(CoreError::Shape("batch-norm vectors differ in length".into()));
        }
        if self.running_var.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(CoreError::Config("batch-norm running variance must be >= 0".into()));
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(CoreError::Config("batch-norm epsilon must be >= 0".into()));
        }
        Ok(())
    }

    /// Apply the normalization to one value of channel `c`.
    pub fn apply(&self, c: usize, x: f64) -> f64 {
        (x - self.running_mean[c]) * self.gamma[c] / (self.running_var[c] + self.epsilon).sqrt()
            + self.beta[c]
    }
}

/// Absorb `bn` into the affine layer `x·w + b`, where `w` is `K×C`.
pub fn fold_batchnorm(w: &RealMatrix, b: &[f64], bn: &BnParams) -> Result<(RealMatrix, Vec<f64>)> {
    bn.validate()?;
    let c = w.cols();
    if b.len() != c || bn.channels() != c {
        return Err(CoreError::Shape(format!(
            "weight has {c} output channels, bias {} and batch-norm {}",
            b.len(),
            bn.channels()
        )));
    }
    let scale: Vec<f64> = (0..c)
        .map(|j| bn.gamma[j] / (bn.running_var[j] + bn.epsilon).sqrt())
        .collect();
    if scale.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::Config("batch-norm variance plus epsilon is zero".into()));
    }
    let mut folded = w.clone();
    for k in 0..w.rows() {
        for (j, s) in scale.iter().enumerate() {
            folded[(k, j)] *= s;
        }
    }
    let bias = (0..c)
        .map(|j| (b[j] - bn.running_mean[j]) * scale[j] + bn.beta[j])
        .collect();
    Ok((folded, bias))
}

/// Largest `frac_bits` for which at most `clip_fraction` of `values` saturate.
pub fn choose_frac_bits(values: &[f64], total_bits: u8, clip_fraction: f64) -> Result<FixedFormat> {
    let base = FixedFormat::default_for_bits(total_bits)?;
    let allowed = (clip_fraction * values.len() as f64).floor() as usize;
    for frac in (0..total_bits).rev() {
        let fmt = base.with_frac_bits(frac)?;
        let limit_hi = (fmt.max_code() as f64 + 0.5) * fmt.ulp();
        let limit_lo = (fmt.min_code() as f64 - 0.5) * fmt.ulp();
        let clipped = values
            .iter()
            .filter(|&&v| v >= limit_hi || v < limit_lo)
            .count();
        if clipped <= allowed {
            return Ok(fmt);
        }
    }
    base.with_frac_bits(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q8(frac: u8) -> FixedFormat {
        FixedFormat::new(8, frac).unwrap()
    }

    #[test]
    fn zero_quantizes_to_zero() {
        assert_eq!(quantize(&[0.0], &[1], q8(6)).unwrap().codes(), &[0]);
    }

    #[test]
    fn unit_values_in_q8_6() {
        assert_eq!(quantize(&[1.0, -1.0], &[2], q8(6)).unwrap().codes(), &[64, -64]);
    }

    #[test]
    fn dequantize_extremes() {
        let t = QTensor::new(vec![2], vec![64, -128], q8(6)).unwrap();
        assert_eq!(dequantize(&t), vec![1.0, -2.0]);
    }

    #[test]
    fn exhaustive_round_trip_q8_4() {
        let fmt = q8(4);
        for code in fmt.min_code()..=fmt.max_code() {
            let t = QTensor::new(vec![1], vec![code as i32], fmt).unwrap();
            let back = quantize(&dequantize(&t), &[1], fmt).unwrap();
            assert_eq!(back.codes()[0] as i64, code);
        }
    }

    #[test]
    fn saturation_is_counted() {
        let (t, sat) = quantize_with_stats(&[100.0, -100.0, 0.5], &[3], q8(4)).unwrap();
        assert_eq!(t.codes(), &[127, -128, 8]);
        assert_eq!(sat, 2);
    }

    #[test]
    fn halves_round_away_from_zero() {
        // 0.5 ulp and -0.5 ulp in Q8.0
        let t = quantize(&[0.5, -0.5, 1.5, -2.5], &[4], q8(0)).unwrap();
        assert_eq!(t.codes(), &[1, -1, 2, -3]);
        assert_eq!(requantize(&[2, -2, 6, -6], 2, q8(0)).unwrap(), vec![1, -1, 2, -2]);
    }

    #[test]
    fn requantize_examples() {
        assert_eq!(requantize(&[128], 7, q8(6)).unwrap(), vec![1]);
        assert_eq!(requantize(&[1 << 20], 4, q8(6)).unwrap(), vec![127]);
        assert_eq!(requantize(&[-(1 << 20)], 4, q8(6)).unwrap(), vec![-128]);
    }

    #[test]
    fn negative_shift_is_a_config_error() {
        assert!(matches!(requantize(&[1], -1, q8(6)), Err(CoreError::Config(_))));
    }

    #[test]
    fn format_validation() {
        assert!(FixedFormat::new(12, 4).is_err());
        assert!(FixedFormat::new(8, 8).is_err());
        assert!(FixedFormat::new(16, 15).is_ok());
        assert_eq!(FixedFormat::Q8_4.accumulator_bits(), 32);
        assert_eq!(FixedFormat::Q16_8.accumulator_bits(), 48);
    }

    #[test]
    fn qtensor_rejects_bad_shapes_and_codes() {
        assert!(QTensor::new(vec![2, 2], vec![0; 3], q8(0)).is_err());
        assert!(QTensor::new(vec![1], vec![200], q8(0)).is_err());
        assert!(QTensor::new(vec![0], vec![], q8(0)).is_err());
    }

    #[test]
    fn wrap_to_width_is_modular() {
        assert_eq!(wrap_to_width(i32::MAX as i64 + 1, 32), i32::MIN as i64);
        assert_eq!(wrap_to_width(-1, 32), -1);
        assert_eq!(wrap_to_width(1 << 47, 48), -(1 << 47));
    }

    #[test]
    fn identity_batchnorm_leaves_layer_unchanged() {
        let w = RealMatrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let b = vec![0.25, -1.0];
        let (w2, b2) = fold_batchnorm(&w, &b, &BnParams::identity(2)).unwrap();
        assert_eq!(w2, w);
        assert_eq!(b2, b);
    }

    #[test]
    fn gamma_two_scales_layer() {
        let w = RealMatrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let b = vec![0.25, -1.0];
        let mut bn = BnParams::identity(2);
        bn.gamma = vec![2.0, 2.0];
        let (w2, b2) = fold_batchnorm(&w, &b, &bn).unwrap();
        assert_eq!(w2.data(), &[2.0, -4.0, 1.0, 6.0]);
        assert_eq!(b2, vec![0.5, -2.0]);
    }

    #[test]
    fn fold_batchnorm_length_mismatch() {
        let w = RealMatrix::zeros(2, 3);
        assert!(fold_batchnorm(&w, &[0.0; 3], &BnParams::identity(2)).is_err());
        assert!(fold_batchnorm(&w, &[0.0; 2], &BnParams::identity(3)).is_err());
    }

    #[test]
    fn frac_bits_selection() {
        // Values up to 3.9 fit Q8.5 (max 3.97) but not Q8.6 (max 1.98).
        let vals = vec![3.9, -3.9, 0.1];
        assert_eq!(choose_frac_bits(&vals, 8, 0.0).unwrap(), q8(5));
        assert_eq!(choose_frac_bits(&[0.0; 4], 8, 0.0).unwrap(), q8(7));
        // A single outlier among 2000 values is tolerated at 0.1%.
        let mut many = vec![0.5; 1999];
        many.push(1000.0);
        assert_eq!(choose_frac_bits(&many, 8, DEFAULT_CLIP_FRACTION).unwrap(), q8(7));
    }
}
