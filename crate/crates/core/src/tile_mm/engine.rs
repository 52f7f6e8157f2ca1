use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::{JobShape, MatmulJob, MatmulOutput, OutputOrientation, TileConfig, TileVisit};
use crate::error::{CoreError, Result};
use crate::fixq::{requantize_value, wrap_to_width, QTensor};

pub const DEFAULT_ENGINE: &str = "tiled-parallel";

/// A matrix-multiplication execution strategy.
///
/// Every engine must produce bit-identical tensors for the same job; they
/// differ only in traversal, parallelism and trace support.
pub trait MatmulEngine: Send + Sync {
    fn name(&self) -> &'static str;

    fn run(&self, job: &MatmulJob<'_>) -> Result<MatmulOutput>;
}

/// Engines addressable by name.
#[derive(Clone)]
pub struct EngineRegistry {
    engines: BTreeMap<&'static str, Arc<dyn MatmulEngine>>,
}

impl EngineRegistry {
    pub fn empty() -> Self {
        EngineRegistry { engines: BTreeMap::new() }
    }

    pub fn with_defaults() -> Self {
        let mut reg = Self::empty();
        reg.register(Arc::new(ReferenceEngine));
        reg.register(Arc::new(TiledEngine));
        reg.register(Arc::new(ParallelTiledEngine));
        reg
    }

    /// Add an engine, replacing any previous one with the same name.
    pub fn register(&mut self, engine: Arc<dyn MatmulEngine>) {
        self.engines.insert(engine.name(), engine);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn MatmulEngine>> {
        self.engines
            .get(name)
            .cloned()
            .ok_or_else(|| CoreError::UnknownStrategy { kind: "matmul engine", name: name.to_string() })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.engines.keys().copied().collect()
    }
}

impl Default for EngineRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl std::fmt::Debug for EngineRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.engines.keys()).finish()
    }
}

/// Second-stage narrowing shared by all engines: bias is already in `acc`.
struct Epilogue<'a> {
    job: &'a MatmulJob<'a>,
    shape: JobShape,
}

impl Epilogue<'_> {
    #[inline]
    fn finish(&self, acc: i64, saturations: &mut usize) -> i32 {
        let acc = wrap_to_width(acc, self.shape.acc_bits);
        let (code, sat) = requantize_value(acc, self.shape.shift, self.job.out_fmt);
        *saturations += sat as usize;
        self.job.activation.apply_code(code, self.job.out_fmt)
    }
}

/// Straight triple loop with a 64-bit accumulator; no tiling.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceEngine;

impl MatmulEngine for ReferenceEngine {
    fn name(&self) -> &'static str {
        "reference"
    }

    fn run(&self, job: &MatmulJob<'_>) -> Result<MatmulOutput> {
        let shape = job.validate()?;
        let epi = Epilogue { job, shape };
        let a = job.input.codes();
        let w = job.weight.codes();
        let mut sats = 0;
        let mut out = vec![0i32; shape.rows * shape.c];
        for i in 0..shape.rows {
            for j in 0..shape.c {
                let mut acc = job.bias[j];
                for k in 0..shape.k {
                    acc = acc.wrapping_add(a[i * shape.k + k] as i64 * w[k * shape.c + j] as i64);
                }
                out[i * shape.c + j] = epi.finish(acc, &mut sats);
            }
        }
        let tensor = QTensor::new(vec![shape.rows, shape.c], out, job.out_fmt)?;
        let tensor = if job.max_pool { super::max_columns(&tensor)? } else { tensor };
        Ok(MatmulOutput { tensor, saturations: sats, trace: None })
    }
}

/// Weight matrix rearranged into zero-padded channel blocks, the way it sits in the weight buffer.
struct PackedWeights {
    k_pad: usize,
    n: usize,
    c_tiles: usize,
    /// `[c_tile][k][0..n]`
    data: Vec<i32>,
}

impl PackedWeights {
    fn pack(w: &QTensor, shape: &JobShape, tile: &TileConfig) -> Self {
        let n = tile.n_unroll();
        let k_pad = tile.k_tiles(shape.k) * tile.m_unroll();
        let c_tiles = tile.c_tiles(shape.c);
        let mut data = vec![0i32; c_tiles * k_pad * n];
        let codes = w.codes();
        for ct in 0..c_tiles {
            for k in 0..shape.k {
                let dst = &mut data[(ct * k_pad + k) * n..][..n];
                let c0 = ct * n;
                let width = n.min(shape.c - c0);
                dst[..width].copy_from_slice(&codes[k * shape.c + c0..][..width]);
            }
        }
        PackedWeights { k_pad, n, c_tiles, data }
    }

    #[inline]
    fn column(&self, ct: usize, k: usize) -> &[i32] {
        &self.data[(ct * self.k_pad + k) * self.n..][..self.n]
    }
}

/// Accumulator register type. INT8 operands use a wrapping 32-bit register
/// directly; wider operands use 64 bits and are wrapped to 48 in the epilogue.
trait Accumulator: Copy + Send + Sync {
    fn from_bias(b: i64) -> Self;
    fn mac(self, a: i32, w: i32) -> Self;
    fn widen(self) -> i64;
}

impl Accumulator for i32 {
    #[inline]
    fn from_bias(b: i64) -> Self {
        wrap_to_width(b, 32) as i32
    }
    #[inline]
    fn mac(self, a: i32, w: i32) -> Self {
        self.wrapping_add(a.wrapping_mul(w))
    }
    #[inline]
    fn widen(self) -> i64 {
        self as i64
    }
}

impl Accumulator for i64 {
    #[inline]
    fn from_bias(b: i64) -> Self {
        b
    }
    #[inline]
    fn mac(self, a: i32, w: i32) -> Self {
        self.wrapping_add(a as i64 * w as i64)
    }
    #[inline]
    fn widen(self) -> i64 {
        self
    }
}

struct Kernel<'a> {
    job: &'a MatmulJob<'a>,
    shape: JobShape,
    packed: PackedWeights,
    epi: Epilogue<'a>,
}

impl<'a> Kernel<'a> {
    fn new(job: &'a MatmulJob<'a>) -> Result<Self> {
        let shape = job.validate()?;
        let packed = PackedWeights::pack(job.weight, &shape, &job.tile);
        Ok(Kernel { job, shape, packed, epi: Epilogue { job, shape } })
    }

    fn padded_row(&self, i: usize, buf: &mut [i32]) {
        let k = self.shape.k;
        buf[..k].copy_from_slice(&self.job.input.codes()[i * k..][..k]);
    }

    /// All reduction blocks for one point and one channel block; first-stage sums land in `acc`.
    #[inline]
    fn pass<A: Accumulator>(&self, row: &[i32], ct: usize, acc: &mut [A], trace: &mut Option<Vec<TileVisit>>, point: usize) {
        let n = self.packed.n;
        let c0 = ct * n;
        for (j, slot) in acc.iter_mut().enumerate() {
            *slot = A::from_bias(self.job.bias.get(c0 + j).copied().unwrap_or(0));
        }
        let m = self.job.tile.m_unroll();
        for kt in 0..self.packed.k_pad / m {
            for (k, &a) in row.iter().enumerate().skip(kt * m).take(m) {
                if a == 0 {
                    continue;
                }
                for (slot, &w) in acc.iter_mut().zip(self.packed.column(ct, k)) {
                    *slot = slot.mac(a, w);
                }
            }
            if let Some(t) = trace.as_mut() {
                t.push(TileVisit { point, k_tile: kt, c_tile: ct });
            }
        }
    }

    fn width(&self, ct: usize) -> usize {
        self.packed.n.min(self.shape.c - ct * self.packed.n)
    }

    /// Compute channel block `ct` for every point; returns `rows × width` codes, or `width` maxima when pooling.
    fn column_block<A: Accumulator + Default>(&self, ct: usize, trace: &mut Option<Vec<TileVisit>>) -> (Vec<i32>, usize) {
        let width = self.width(ct);
        let mut row = vec![0i32; self.packed.k_pad];
        let mut acc = vec![A::default(); self.packed.n];
        let mut sats = 0;
        let pool = self.job.max_pool;
        let mut out = if pool { vec![i32::MIN; width] } else { Vec::with_capacity(self.shape.rows * width) };
        for i in 0..self.shape.rows {
            self.padded_row(i, &mut row);
            self.pass(&row, ct, &mut acc, trace, i);
            for j in 0..width {
                let code = self.epi.finish(acc[j].widen(), &mut sats);
                if pool {
                    out[j] = out[j].max(code);
                } else {
                    out.push(code);
                }
            }
        }
        (out, sats)
    }

    fn run_sequential<A: Accumulator + Default>(&self) -> Result<MatmulOutput> {
        let JobShape { rows, c, .. } = self.shape;
        let mut trace = self.job.record_trace.then(Vec::new);
        let mut sats = 0;
        let mut out = vec![0i32; rows * c];
        match self.job.orientation {
            OutputOrientation::RowOriented => {
                let mut row = vec![0i32; self.packed.k_pad];
                let mut acc = vec![A::default(); self.packed.n];
                for i in 0..rows {
                    self.padded_row(i, &mut row);
                    for ct in 0..self.packed.c_tiles {
                        self.pass(&row, ct, &mut acc, &mut trace, i);
                        for j in 0..self.width(ct) {
                            out[i * c + ct * self.packed.n + j] = self.epi.finish(acc[j].widen(), &mut sats);
                        }
                    }
                }
            }
            OutputOrientation::ColumnOriented => {
                let blocks: Vec<_> = (0..self.packed.c_tiles)
                    .map(|ct| self.column_block::<A>(ct, &mut trace))
                    .collect();
                return self.assemble(blocks, trace);
            }
        }
        let tensor = QTensor::new(vec![rows, c], out, self.job.out_fmt)?;
        Ok(MatmulOutput { tensor, saturations: sats, trace })
    }

    fn run_parallel<A: Accumulator + Default>(&self) -> Result<MatmulOutput> {
        let blocks: Vec<_> = (0..self.packed.c_tiles)
            .into_par_iter()
            .map(|ct| self.column_block::<A>(ct, &mut None))
            .collect();
        self.assemble(blocks, None)
    }

    fn assemble(&self, blocks: Vec<(Vec<i32>, usize)>, trace: Option<Vec<TileVisit>>) -> Result<MatmulOutput> {
        let JobShape { rows, c, .. } = self.shape;
        let n = self.packed.n;
        let saturations = blocks.iter().map(|b| b.1).sum();
        let tensor = if self.job.max_pool {
            let codes: Vec<i32> = blocks.into_iter().flat_map(|b| b.0).collect();
            QTensor::new(vec![1, c], codes, self.job.out_fmt)?
        } else {
            let mut out = vec![0i32; rows * c];
            for (ct, (codes, _)) in blocks.into_iter().enumerate() {
                let width = self.width(ct);
                for (i, chunk) in codes.chunks(width).enumerate() {
                    out[i * c + ct * n..][..width].copy_from_slice(chunk);
                }
            }
            QTensor::new(vec![rows, c], out, self.job.out_fmt)?
        };
        Ok(MatmulOutput { tensor, saturations, trace })
    }
}

/// Sequential blocked engine following the hardware traversal; supports traces.
#[derive(Debug, Clone, Copy, Default)]
pub struct TiledEngine;

impl MatmulEngine for TiledEngine {
    fn name(&self) -> &'static str {
        "tiled"
    }

    fn run(&self, job: &MatmulJob<'_>) -> Result<MatmulOutput> {
        let kernel = Kernel::new(job)?;
        if kernel.shape.acc_bits <= 32 {
            kernel.run_sequential::<i32>()
        } else {
            kernel.run_sequential::<i64>()
        }
    }
}

/// Blocked engine that computes channel blocks concurrently. Traces are not recorded.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParallelTiledEngine;

impl MatmulEngine for ParallelTiledEngine {
    fn name(&self) -> &'static str {
        "tiled-parallel"
    }

    fn run(&self, job: &MatmulJob<'_>) -> Result<MatmulOutput> {
        if job.record_trace {
            return TiledEngine.run(job);
        }
        let kernel = Kernel::new(job)?;
        if kernel.shape.acc_bits <= 32 {
            kernel.run_parallel::<i32>()
        } else {
            kernel.run_parallel::<i64>()
        }
    }
}
