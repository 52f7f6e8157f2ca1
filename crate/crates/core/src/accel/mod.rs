//! Accelerator control plane: register-file program, weight store, FSM and
//! the cycle/bandwidth model.
//!
//! Numerical results come from the matmul engine alone; [`MachineParams`]
//! only affects the [`PerfReport`] and the FSM trace.

mod fsm;
mod program;
mod report;
mod store;
mod timing;

use std::sync::Arc;

pub use fsm::{FsmEvent, FsmState, FsmTrace};
pub use program::{
    Destination, Instruction, MemRef, OpKind, Program, Source, TensorDesc, WeightBinding, WeightId,
    WeightRef, MAX_POINTS,
};
pub use report::PerfReport;
pub use store::{StoredWeight, WeightStore, DEFAULT_WEIGHT_CAPACITY};
pub use timing::{
    can_overlap, compute_cycles, default_pipeline_fill, timeline, traffic, MachineParams, Traffic,
    DEFAULT_CLOCK_HZ, DEFAULT_HP_PEAK_BITS_PER_S, DEFAULT_INPUT_BUFFER_CAPACITY, DEFAULT_PER_OP_OVERHEAD,
};

use crate::error::{CoreError, Result};
use crate::fixq::QTensor;
use crate::tile_mm::{EngineRegistry, MatmulEngine, MatmulJob, DEFAULT_ENGINE};

/// Result of one program execution.
#[derive(Debug, Clone)]
pub struct Run {
    pub outputs: Vec<(String, QTensor)>,
    pub report: PerfReport,
    trace: FsmTrace,
}

impl Run {
    pub fn output(&self, name: &str) -> Option<&QTensor> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn fsm_trace(&self) -> &FsmTrace {
        &self.trace
    }
}

/// One simulated accelerator instance. Runs one program at a time.
pub struct Accelerator {
    store: WeightStore,
    engine: Arc<dyn MatmulEngine>,
}

impl Accelerator {
    pub fn new() -> Self {
        Self::with_store(WeightStore::default())
    }

    pub fn with_store(store: WeightStore) -> Self {
        let engine = EngineRegistry::with_defaults().get(DEFAULT_ENGINE).expect("default engine registered");
        Accelerator { store, engine }
    }

    pub fn with_engine(mut self, engine: Arc<dyn MatmulEngine>) -> Self {
        self.engine = engine;
        self
    }

    pub fn engine_name(&self) -> &'static str {
        self.engine.name()
    }

    pub fn store(&self) -> &WeightStore {
        &self.store
    }

    pub fn load_weights(&mut self, id: &str, weight: QTensor, bias: Vec<i64>) -> Result<()> {
        self.store.load_weights(id, weight, bias)
    }

    /// Load every weight the program carries that is not already present.
    pub fn install(&mut self, program: &Program) -> Result<()> {
        for b in &program.bindings {
            if !self.store.contains(&b.id) {
                self.store.load_weights(&b.id, b.weight.clone(), b.bias.clone())?;
            }
        }
        Ok(())
    }

    /// Validate the whole program, then execute it instruction by instruction.
    pub fn run_program(&mut self, program: &Program, input: &QTensor, mp: &MachineParams) -> Result<Run> {
        program.validate(&self.store, mp.input_buffer_capacity)?;
        let desc = &program.input;
        if input.dims() != [desc.rows, desc.cols] {
            return Err(CoreError::Shape(format!(
                "program expects a {}x{} input, got {:?}",
                desc.rows,
                desc.cols,
                input.dims()
            )));
        }
        if input.fmt() != desc.fmt {
            return Err(CoreError::Format(format!("program expects {} input, got {}", desc.fmt, input.fmt())));
        }
        let (mut report, trace) = timeline(program, mp)?;

        let mut memory = vec![0i32; program.memory_elems];
        scatter(&mut memory, &desc.region, input.codes(), desc.rows, desc.cols);
        let mut input_buffer: Option<QTensor> = None;
        let mut saturations = 0u64;
        let result = (|| {
            for (i, inst) in program.instructions.iter().enumerate() {
                let operand = match inst.input_src {
                    Source::InputBuffer => input_buffer.take().expect("validated routing"),
                    Source::ExternalMemory(r) => QTensor::new(
                        vec![inst.n_rows, inst.k_dim],
                        gather(&memory, &r, inst.n_rows, inst.k_dim),
                        inst.input_fmt,
                    )?,
                };
                let weight = match &inst.weight {
                    WeightRef::Stored(id) => self.store.get(id).expect("validated binding"),
                    WeightRef::Frame { src, fmt } => {
                        let codes = gather(&memory, src, inst.k_dim, inst.c_dim);
                        let t = QTensor::new(vec![inst.k_dim, inst.c_dim], codes, *fmt)?;
                        self.store.load_frame(i, t)
                    }
                };
                let job = MatmulJob {
                    input: &operand,
                    weight: &weight.weight,
                    bias: &weight.bias,
                    tile: mp.tile,
                    orientation: inst.orientation,
                    activation: inst.activation,
                    shift: inst.requant_shift,
                    out_fmt: inst.out_fmt,
                    max_pool: inst.op_kind == OpKind::MatmulMaxpool,
                    record_trace: false,
                };
                let out = self.engine.run(&job)?;
                saturations += out.saturations as u64;
                match inst.output_dst {
                    Destination::InputBuffer => input_buffer = Some(out.tensor),
                    Destination::ExternalMemory(r) => {
                        scatter(&mut memory, &r, out.tensor.codes(), inst.output_rows(), inst.c_dim)
                    }
                }
            }
            Ok::<_, CoreError>(())
        })();
        self.store.clear_frame();
        result?;
        report.saturation_events = saturations;

        let outputs = program
            .outputs
            .iter()
            .map(|d| {
                let codes = gather(&memory, &d.region, d.rows, d.cols);
                Ok((d.name.clone(), QTensor::new(vec![d.rows, d.cols], codes, d.fmt)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Run { outputs, report, trace })
    }
}

impl Default for Accelerator {
    fn default() -> Self {
        Self::new()
    }
}

/// Cycle model without executing anything.
pub fn estimate_latency(program: &Program, mp: &MachineParams) -> Result<PerfReport> {
    program.validate_structure(mp.input_buffer_capacity)?;
    Ok(timeline(program, mp)?.0)
}

fn gather(memory: &[i32], r: &MemRef, rows: usize, cols: usize) -> Vec<i32> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        out.extend_from_slice(&memory[r.offset + i * r.row_stride..][..cols]);
    }
    out
}

fn scatter(memory: &mut [i32], r: &MemRef, codes: &[i32], rows: usize, cols: usize) {
    for rep in 0..r.replicate.max(1) {
        for i in 0..rows {
            let dst = r.offset + (rep * rows + i) * r.row_stride;
            memory[dst..dst + cols].copy_from_slice(&codes[i * cols..][..cols]);
        }
    }
}
