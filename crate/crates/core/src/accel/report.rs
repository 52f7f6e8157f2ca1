use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Operation counts and modeled timing for one program run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub macs: u64,
    pub ops: u64,
    pub compute_cycles: u64,
    pub dma_cycles: u64,
    pub total_cycles: u64,
    pub latency_s: f64,
    pub effective_gops: f64,
    pub bytes_moved: u64,
    pub saturation_events: u64,
}

impl PerfReport {
    pub fn frames_per_second(&self) -> f64 {
        if self.latency_s > 0.0 {
            1.0 / self.latency_s
        } else {
            f64::INFINITY
        }
    }

    /// One `key=value` pair per line.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "macs={}", self.macs);
        let _ = writeln!(s, "ops={}", self.ops);
        let _ = writeln!(s, "compute_cycles={}", self.compute_cycles);
        let _ = writeln!(s, "dma_cycles={}", self.dma_cycles);
        let _ = writeln!(s, "total_cycles={}", self.total_cycles);
        let _ = writeln!(s, "latency_s={:.9}", self.latency_s);
        let _ = writeln!(s, "effective_gops={:.3}", self.effective_gops);
        let _ = writeln!(s, "bytes_moved={}", self.bytes_moved);
        let _ = writeln!(s, "saturation_events={}", self.saturation_events);
        s
    }

    pub fn from_key_value(text: &str) -> Option<Self> {
        let mut r = PerfReport::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=')?;
            match k.trim() {
                "macs" => r.macs = v.parse().ok()?,
                "ops" => r.ops = v.parse().ok()?,
                "compute_cycles" => r.compute_cycles = v.parse().ok()?,
                "dma_cycles" => r.dma_cycles = v.parse().ok()?,
                "total_cycles" => r.total_cycles = v.parse().ok()?,
                "latency_s" => r.latency_s = v.parse().ok()?,
                "effective_gops" => r.effective_gops = v.parse().ok()?,
                "bytes_moved" => r.bytes_moved = v.parse().ok()?,
                "saturation_events" => r.saturation_events = v.parse().ok()?,
                _ => {}
            }
        }
        Some(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_and_json_agree() {
        let r = PerfReport {
            macs: 10,
            ops: 20,
            compute_cycles: 5,
            dma_cycles: 3,
            total_cycles: 9,
            latency_s: 9e-8,
            effective_gops: 222.222,
            bytes_moved: 77,
            saturation_events: 1,
        };
        let kv = PerfReport::from_key_value(&r.to_key_value()).unwrap();
        assert_eq!(kv, r);
        let js: PerfReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(js, r);
    }
}
