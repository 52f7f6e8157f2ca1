use serde::{Deserialize, Serialize};

use super::store::WeightStore;
use crate::error::{CoreError, Result};
use crate::fixq::{FixedFormat, QTensor};
use crate::tile_mm::{Activation, OutputOrientation};

/// Largest point count the accelerator accepts in one pass.
pub const MAX_POINTS: usize = 4096;

pub type WeightId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Matmul,
    MatmulMaxpool,
}

/// A strided matrix region in external memory, addressed in elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemRef {
    pub offset: usize,
    pub row_stride: usize,
    /// Number of times a written block is repeated down the rows (outputs only).
    pub replicate: usize,
}

impl MemRef {
    pub fn dense(offset: usize, cols: usize) -> Self {
        MemRef { offset, row_stride: cols, replicate: 1 }
    }

    pub fn strided(offset: usize, row_stride: usize) -> Self {
        MemRef { offset, row_stride, replicate: 1 }
    }

    pub fn replicated(self, times: usize) -> Self {
        MemRef { replicate: times, ..self }
    }

    /// Half-open element interval touched by a `rows × cols` access.
    pub fn span(&self, rows: usize, cols: usize) -> (usize, usize) {
        let total_rows = rows * self.replicate.max(1);
        (self.offset, self.offset + (total_rows - 1) * self.row_stride + cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    ExternalMemory(MemRef),
    InputBuffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Destination {
    ExternalMemory(MemRef),
    InputBuffer,
}

/// Where an instruction's weight matrix comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightRef {
    /// Pre-loaded into the weight store.
    Stored(WeightId),
    /// Produced earlier in the same frame and read back from external memory
    /// as a `k_dim × c_dim` matrix; lives only for the current run.
    Frame { src: MemRef, fmt: FixedFormat },
}

/// One register-file configuration entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub label: String,
    pub op_kind: OpKind,
    pub n_rows: usize,
    pub k_dim: usize,
    pub c_dim: usize,
    pub input_src: Source,
    pub input_fmt: FixedFormat,
    pub weight: WeightRef,
    pub output_dst: Destination,
    pub orientation: OutputOrientation,
    pub activation: Activation,
    pub requant_shift: i32,
    pub out_fmt: FixedFormat,
}

impl Instruction {
    pub fn output_rows(&self) -> usize {
        match self.op_kind {
            OpKind::Matmul => self.n_rows,
            OpKind::MatmulMaxpool => 1,
        }
    }

    pub fn macs(&self) -> u64 {
        (self.n_rows * self.k_dim * self.c_dim) as u64
    }

    /// External-memory intervals this instruction reads.
    pub fn reads(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if let Source::ExternalMemory(r) = self.input_src {
            out.push(r.span(self.n_rows, self.k_dim));
        }
        if let WeightRef::Frame { src, .. } = &self.weight {
            out.push(src.span(self.k_dim, self.c_dim));
        }
        out
    }

    /// External-memory interval this instruction writes, if any.
    pub fn writes(&self) -> Option<(usize, usize)> {
        match self.output_dst {
            Destination::ExternalMemory(r) => Some(r.span(self.output_rows(), self.c_dim)),
            Destination::InputBuffer => None,
        }
    }

    /// True when this instruction reads something `prev` wrote to external memory.
    pub fn depends_on(&self, prev: &Instruction) -> bool {
        let Some((ws, we)) = prev.writes() else {
            return false;
        };
        self.reads().iter().any(|&(rs, re)| rs < we && ws < re)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightBinding {
    pub id: WeightId,
    pub weight: QTensor,
    pub bias: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub name: String,
    pub region: MemRef,
    pub rows: usize,
    pub cols: usize,
    pub fmt: FixedFormat,
}

/// An ordered instruction stream plus the weights and tensors it refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub bindings: Vec<WeightBinding>,
    pub input: TensorDesc,
    pub outputs: Vec<TensorDesc>,
    /// External memory size in elements.
    pub memory_elems: usize,
}

impl Program {
    pub fn macs(&self) -> u64 {
        self.instructions.iter().map(Instruction::macs).sum()
    }

    fn check_region(&self, what: &str, r: &MemRef, rows: usize, cols: usize) -> Result<()> {
        if r.row_stride < cols {
            return Err(CoreError::Validation(format!(
                "{what}: row stride {} shorter than {cols} columns",
                r.row_stride
            )));
        }
        if r.replicate == 0 {
            return Err(CoreError::Validation(format!("{what}: replicate count is zero")));
        }
        let (_, end) = r.span(rows, cols);
        if end > self.memory_elems {
            return Err(CoreError::Validation(format!(
                "{what}: region ends at {end}, memory holds {}",
                self.memory_elems
            )));
        }
        Ok(())
    }

    /// Checks that do not depend on the weight store.
    pub fn validate_structure(&self, input_buffer_capacity: usize) -> Result<()> {
        let ins = &self.instructions;
        if ins.is_empty() {
            return Err(CoreError::Validation("program has no instructions".into()));
        }
        self.check_region("program input", &self.input.region, self.input.rows, self.input.cols)?;
        for out in &self.outputs {
            self.check_region(&format!("output `{}`", out.name), &out.region, out.rows, out.cols)?;
        }
        for (i, inst) in ins.iter().enumerate() {
            let what = format!("instruction {i} ({})", inst.label);
            if inst.n_rows == 0 || inst.k_dim == 0 || inst.c_dim == 0 {
                return Err(CoreError::Validation(format!("{what}: dimensions must be positive")));
            }
            if inst.n_rows > MAX_POINTS {
                return Err(CoreError::Capacity(format!(
                    "{what}: {} rows exceed the {MAX_POINTS}-point limit",
                    inst.n_rows
                )));
            }
            if inst.op_kind == OpKind::MatmulMaxpool && inst.orientation != OutputOrientation::ColumnOriented {
                return Err(CoreError::Validation(format!("{what}: max-pool requires column-oriented output")));
            }
            if inst.requant_shift < 0 {
                return Err(CoreError::Config(format!("{what}: negative requantization shift")));
            }
            match inst.input_src {
                Source::ExternalMemory(r) => self.check_region(&what, &r, inst.n_rows, inst.k_dim)?,
                Source::InputBuffer => {
                    let prev = i
                        .checked_sub(1)
                        .map(|p| &ins[p])
                        .filter(|p| p.output_dst == Destination::InputBuffer)
                        .ok_or_else(|| {
                            CoreError::Validation(format!("{what}: reads the input buffer but nothing was routed there"))
                        })?;
                    if prev.output_rows() != inst.n_rows || prev.c_dim != inst.k_dim {
                        return Err(CoreError::Validation(format!(
                            "{what}: expects {}x{} from the input buffer, previous instruction produced {}x{}",
                            inst.n_rows,
                            inst.k_dim,
                            prev.output_rows(),
                            prev.c_dim
                        )));
                    }
                    if prev.out_fmt != inst.input_fmt {
                        return Err(CoreError::Validation(format!("{what}: input format differs from producer")));
                    }
                }
            }
            match inst.output_dst {
                Destination::ExternalMemory(r) => self.check_region(&what, &r, inst.output_rows(), inst.c_dim)?,
                Destination::InputBuffer => {
                    let consumer_reads_buffer = ins.get(i + 1).is_some_and(|n| n.input_src == Source::InputBuffer);
                    if !consumer_reads_buffer {
                        return Err(CoreError::Validation(format!(
                            "{what}: routes to the input buffer but the next instruction does not read it"
                        )));
                    }
                    let elems = inst.output_rows() * inst.c_dim;
                    if elems > input_buffer_capacity {
                        return Err(CoreError::Capacity(format!(
                            "{what}: {elems} elements exceed input buffer capacity {input_buffer_capacity}"
                        )));
                    }
                }
            }
            if let WeightRef::Frame { src, .. } = &inst.weight {
                self.check_region(&what, src, inst.k_dim, inst.c_dim)?;
            }
        }
        if !matches!(ins.last().map(|i| i.output_dst), Some(Destination::ExternalMemory(_))) {
            return Err(CoreError::Validation("final instruction must write external memory".into()));
        }
        Ok(())
    }

    /// Full validation against the weights currently bound in `store`.
    pub fn validate(&self, store: &WeightStore, input_buffer_capacity: usize) -> Result<()> {
        self.validate_structure(input_buffer_capacity)?;
        for (i, inst) in self.instructions.iter().enumerate() {
            if let WeightRef::Stored(id) = &inst.weight {
                let entry = store.get(id).ok_or_else(|| {
                    CoreError::Validation(format!("instruction {i} ({}) uses unbound weight `{id}`", inst.label))
                })?;
                if entry.weight.dims() != [inst.k_dim, inst.c_dim] {
                    return Err(CoreError::Validation(format!(
                        "weight `{id}` is {:?}, instruction {i} needs {}x{}",
                        entry.weight.dims(),
                        inst.k_dim,
                        inst.c_dim
                    )));
                }
            }
        }
        Ok(())
    }
}
