use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::fixq::QTensor;

/// Default weight buffer capacity in bytes (enough for every canonical PointNet variant).
pub const DEFAULT_WEIGHT_CAPACITY: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredWeight {
    pub weight: QTensor,
    pub bias: Vec<i64>,
}

impl StoredWeight {
    fn bytes(&self) -> usize {
        self.weight.len() * self.weight.fmt().bytes() + self.bias.len() * 8
    }
}

/// Immutable on-chip weight storage. Entries cannot be replaced once loaded;
/// frame entries are scratch space cleared at the end of every run.
#[derive(Debug, Clone)]
pub struct WeightStore {
    entries: HashMap<String, StoredWeight>,
    frame: HashMap<usize, StoredWeight>,
    capacity_bytes: usize,
    used_bytes: usize,
}

impl WeightStore {
    pub fn new(capacity_bytes: usize) -> Self {
        WeightStore { entries: HashMap::new(), frame: HashMap::new(), capacity_bytes, used_bytes: 0 }
    }

    pub fn load_weights(&mut self, id: &str, weight: QTensor, bias: Vec<i64>) -> Result<()> {
        if self.entries.contains_key(id) {
            return Err(CoreError::WeightStore(format!("weight `{id}` is already loaded")));
        }
        let (_, c) = weight.matrix_dims()?;
        if bias.len() != c {
            return Err(CoreError::WeightStore(format!(
                "weight `{id}` has {c} columns but {} bias entries",
                bias.len()
            )));
        }
        let entry = StoredWeight { weight, bias };
        let bytes = entry.bytes();
        if self.used_bytes + bytes > self.capacity_bytes {
            return Err(CoreError::Capacity(format!(
                "weight `{id}` needs {bytes} bytes, {} of {} free",
                self.capacity_bytes - self.used_bytes,
                self.capacity_bytes
            )));
        }
        self.used_bytes += bytes;
        self.entries.insert(id.to_string(), entry);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&StoredWeight> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn used_bytes(&self) -> usize {
        self.used_bytes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn load_frame(&mut self, slot: usize, weight: QTensor) -> &StoredWeight {
        let c = weight.dims()[1];
        self.frame.insert(slot, StoredWeight { weight, bias: vec![0; c] });
        &self.frame[&slot]
    }

    pub(crate) fn clear_frame(&mut self) {
        self.frame.clear();
    }

    pub fn frame_entries(&self) -> usize {
        self.frame.len()
    }
}

impl Default for WeightStore {
    fn default() -> Self {
        Self::new(DEFAULT_WEIGHT_CAPACITY)
    }
}
