use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Controller states. `Overlap` marks a load of the next instruction issued
/// into the idle ping/pong buffer while the current one computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FsmState {
    Idle,
    Config,
    Load,
    Compute,
    Drain,
    Overlap,
}

impl FsmState {
    pub fn as_str(self) -> &'static str {
        match self {
            FsmState::Idle => "IDLE",
            FsmState::Config => "CONFIG",
            FsmState::Load => "LOAD",
            FsmState::Compute => "COMPUTE",
            FsmState::Drain => "DRAIN",
            FsmState::Overlap => "OVERLAP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsmEvent {
    pub cycle: u64,
    pub state: FsmState,
    pub buffer_id: u8,
    pub instruction: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsmTrace {
    events: Vec<FsmEvent>,
}

impl FsmTrace {
    pub fn new(events: Vec<FsmEvent>) -> Self {
        FsmTrace { events }
    }

    /// Stable sort by cycle.
    pub fn sort(&mut self) {
        self.events.sort_by_key(|e| e.cycle);
    }

    pub fn events(&self) -> &[FsmEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn overlaps(&self) -> usize {
        self.count(FsmState::Overlap)
    }

    pub fn count(&self, state: FsmState) -> usize {
        self.events.iter().filter(|e| e.state == state).count()
    }

    /// `cycle,state,buffer_id,instruction_index` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cycle,state,buffer_id,instruction_index\n");
        for e in &self.events {
            let _ = writeln!(out, "{},{},{},{}", e.cycle, e.state.as_str(), e.buffer_id, e.instruction);
        }
        out
    }
}
