//! Cycle and bandwidth model.
//!
//! Per instruction the PE array needs `n_rows · ⌈K/m⌉ · ⌈C/n⌉` passes plus a
//! pipeline fill. DMA moves inputs and weights into the ping/pong buffers and
//! drains results from the second-stage output buffer. With double buffering
//! the load of instruction `i+1` and the drain of `i-1` run under the compute
//! of `i`, unless `i+1` reads external memory written by `i`.

use serde::{Deserialize, Serialize};

use super::fsm::{FsmEvent, FsmState, FsmTrace};
use super::program::{Destination, Instruction, Program, Source, WeightRef};
use super::report::PerfReport;
use crate::error::{CoreError, Result};
use crate::tile_mm::TileConfig;

/// Accelerator timing and capacity parameters. The fill and overhead terms are
/// calibration knobs, not measured values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineParams {
    pub tile: TileConfig,
    pub clock_hz: f64,
    pub hp_peak_bits_per_s: f64,
    pub pipeline_fill_cycles: u64,
    pub per_op_overhead_cycles: u64,
    pub bytes_per_element: usize,
    pub double_buffering: bool,
    /// Input buffer capacity in elements.
    pub input_buffer_capacity: usize,
}

pub const DEFAULT_CLOCK_HZ: f64 = 150e6;
pub const DEFAULT_HP_PEAK_BITS_PER_S: f64 = 102.4e9;
pub const DEFAULT_PER_OP_OVERHEAD: u64 = 256;
pub const DEFAULT_INPUT_BUFFER_CAPACITY: usize = 4096 * 1088;

/// Adder-tree depth plus multiplier stage for an `m_unroll`-wide PE.
pub fn default_pipeline_fill(m_unroll: usize) -> u64 {
    m_unroll as u64 + (m_unroll as f64).log2().ceil() as u64
}

impl MachineParams {
    pub fn for_tile(tile: TileConfig) -> Self {
        MachineParams {
            tile,
            clock_hz: DEFAULT_CLOCK_HZ,
            hp_peak_bits_per_s: DEFAULT_HP_PEAK_BITS_PER_S,
            pipeline_fill_cycles: default_pipeline_fill(tile.m_unroll()),
            per_op_overhead_cycles: DEFAULT_PER_OP_OVERHEAD,
            bytes_per_element: 1,
            double_buffering: true,
            input_buffer_capacity: DEFAULT_INPUT_BUFFER_CAPACITY,
        }
    }

    pub fn with_bits(mut self, bits: u8) -> Self {
        self.bytes_per_element = bits as usize / 8;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return Err(CoreError::Config("clock must be positive".into()));
        }
        if !(self.hp_peak_bits_per_s > 0.0 && self.hp_peak_bits_per_s.is_finite()) {
            return Err(CoreError::Config("HP bandwidth must be positive".into()));
        }
        if self.bytes_per_element != 1 && self.bytes_per_element != 2 {
            return Err(CoreError::Config(format!(
                "bytes per element must be 1 or 2, got {}",
                self.bytes_per_element
            )));
        }
        Ok(())
    }

    /// Bits the HP port moves per accelerator clock.
    pub fn bits_per_cycle(&self) -> f64 {
        self.hp_peak_bits_per_s / self.clock_hz
    }

    pub fn dma_cycles(&self, bytes: u64) -> u64 {
        if bytes == 0 {
            return 0;
        }
        ((bytes * 8) as f64 / self.bits_per_cycle()).ceil() as u64
    }

    /// `2 · m · n · clock` in GOPS.
    pub fn roofline_gops(&self) -> f64 {
        2.0 * (self.tile.m_unroll() * self.tile.n_unroll()) as f64 * self.clock_hz / 1e9
    }
}

impl Default for MachineParams {
    fn default() -> Self {
        Self::for_tile(TileConfig::default())
    }
}

/// Data movement of one instruction in bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    pub load: u64,
    pub store: u64,
}

pub fn traffic(inst: &Instruction, mp: &MachineParams) -> Traffic {
    let bpe = mp.bytes_per_element as u64;
    let input = match inst.input_src {
        Source::ExternalMemory(_) => (inst.n_rows * inst.k_dim) as u64 * bpe,
        Source::InputBuffer => 0,
    };
    let weights = (inst.k_dim * inst.c_dim) as u64 * bpe;
    // Bias words are four elements wide (32-bit for INT8, 48-bit padded to 64 for INT16).
    let bias = match inst.weight {
        WeightRef::Stored(_) => inst.c_dim as u64 * 4 * bpe,
        WeightRef::Frame { .. } => 0,
    };
    let store = match inst.output_dst {
        Destination::ExternalMemory(r) => (inst.output_rows() * inst.c_dim * r.replicate.max(1)) as u64 * bpe,
        Destination::InputBuffer => 0,
    };
    Traffic { load: input + weights + bias, store }
}

pub fn compute_cycles(inst: &Instruction, mp: &MachineParams) -> u64 {
    (inst.n_rows * mp.tile.k_tiles(inst.k_dim) * mp.tile.c_tiles(inst.c_dim)) as u64 + mp.pipeline_fill_cycles
}

/// Whether the load of `next` may run under the compute of `cur`.
pub fn can_overlap(cur: &Instruction, next: &Instruction, mp: &MachineParams) -> bool {
    mp.double_buffering && !next.depends_on(cur)
}

/// Walk the program through the cycle model, producing the report and FSM trace.
pub fn timeline(p: &Program, mp: &MachineParams) -> Result<(PerfReport, FsmTrace)> {
    mp.validate()?;
    let ins = &p.instructions;
    let traffic: Vec<Traffic> = ins.iter().map(|i| traffic(i, mp)).collect();
    let load: Vec<u64> = traffic.iter().map(|t| mp.dma_cycles(t.load)).collect();
    let store: Vec<u64> = traffic.iter().map(|t| mp.dma_cycles(t.store)).collect();

    let mut events = Vec::with_capacity(ins.len() * 6);
    // Register-file preload: every instruction is configured before any compute.
    for (i, _) in ins.iter().enumerate() {
        events.push(FsmEvent { cycle: 0, state: FsmState::Idle, buffer_id: buffer(i), instruction: i });
        events.push(FsmEvent { cycle: 0, state: FsmState::Config, buffer_id: buffer(i), instruction: i });
    }

    let mut report = PerfReport::default();
    let mut t: u64 = 0;
    let mut pending_store = 0;
    let mut load_started = false;
    for (i, inst) in ins.iter().enumerate() {
        if !load_started {
            events.push(FsmEvent { cycle: t, state: FsmState::Load, buffer_id: buffer(i), instruction: i });
            t += load[i];
        }
        let compute = compute_cycles(inst, mp);
        let next = ins.get(i + 1);
        let overlap = next.is_some_and(|n| can_overlap(inst, n, mp));
        events.push(FsmEvent { cycle: t, state: FsmState::Compute, buffer_id: buffer(i), instruction: i });
        let mut dma = pending_store;
        if overlap {
            events.push(FsmEvent { cycle: t, state: FsmState::Overlap, buffer_id: buffer(i + 1), instruction: i + 1 });
            events.push(FsmEvent { cycle: t, state: FsmState::Load, buffer_id: buffer(i + 1), instruction: i + 1 });
            dma += load[i + 1];
        }
        let stage = compute.max(dma) + mp.per_op_overhead_cycles;
        t += stage;
        events.push(FsmEvent { cycle: t, state: FsmState::Drain, buffer_id: buffer(i), instruction: i });

        report.compute_cycles += compute;
        report.dma_cycles += load[i] + store[i];
        report.bytes_moved += traffic[i].load + traffic[i].store;
        report.macs += inst.macs();

        if next.is_some() && !overlap {
            // Hazard or single buffering: drain, then load the next operands.
            t += store[i];
            pending_store = 0;
            load_started = false;
        } else {
            pending_store = store[i];
            load_started = true;
        }
    }
    t += pending_store;

    report.ops = 2 * report.macs;
    report.total_cycles = t;
    report.latency_s = t as f64 / mp.clock_hz;
    report.effective_gops = if report.latency_s > 0.0 { report.ops as f64 / report.latency_s / 1e9 } else { 0.0 };
    let mut trace = FsmTrace::new(events);
    trace.sort();
    Ok((report, trace))
}

fn buffer(i: usize) -> u8 {
    (i % 2) as u8
}
