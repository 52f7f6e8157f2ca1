//! Fitting frames to the accelerator's point budget.
//!
//! Strategies implement [`CapacityStrategy`] and are registered by name in a
//! [`CapacityRegistry`] so the front end can pick one from configuration.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloudFrame;
use crate::error::{Result, VelodyneError};

/// Largest frame the accelerator accepts.
pub const DEFAULT_CAPACITY: usize = 4096;

pub trait CapacityStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Split or reduce `frame` into frames of at most `cap` points.
    fn fit(&self, frame: &PointCloudFrame, cap: usize) -> Vec<PointCloudFrame>;
}

/// Uniform random selection without replacement, original order kept.
#[derive(Debug, Clone, Copy)]
pub struct Subsample {
    pub seed: u64,
}

impl CapacityStrategy for Subsample {
    fn name(&self) -> &'static str {
        "subsample"
    }

    fn fit(&self, frame: &PointCloudFrame, cap: usize) -> Vec<PointCloudFrame> {
        let n = frame.len();
        if n <= cap {
            return vec![frame.clone()];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut keep = rand::seq::index::sample(&mut rng, n, cap).into_vec();
        keep.sort_unstable();
        vec![frame.with_points(keep.into_iter().map(|i| frame.points[i]).collect())]
    }
}

/// Consecutive chunks of at most `cap` points.
#[derive(Debug, Clone, Copy)]
pub struct Partition;

impl CapacityStrategy for Partition {
    fn name(&self) -> &'static str {
        "partition"
    }

    fn fit(&self, frame: &PointCloudFrame, cap: usize) -> Vec<PointCloudFrame> {
        if frame.is_empty() {
            return vec![frame.clone()];
        }
        frame.points.chunks(cap).map(|c| frame.with_points(c.to_vec())).collect()
    }
}

type Factory = fn(u64) -> Box<dyn CapacityStrategy>;

/// Named strategy constructors; the argument is the random seed.
pub struct CapacityRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl CapacityRegistry {
    pub fn empty() -> Self {
        CapacityRegistry { factories: BTreeMap::new() }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("subsample", |seed| Box::new(Subsample { seed }));
        r.register("partition", |_| Box::new(Partition));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn create(&self, name: &str, seed: u64) -> Result<Box<dyn CapacityStrategy>> {
        self.factories
            .get(name)
            .map(|f| f(seed))
            .ok_or_else(|| VelodyneError::UnknownStrategy(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }
}

impl Default for CapacityRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

/// Apply `strategy` with a point budget of `cap` (at least one).
pub fn fit_to_capacity(frame: &PointCloudFrame, cap: usize, strategy: &dyn CapacityStrategy) -> Vec<PointCloudFrame> {
    strategy.fit(frame, cap.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::CartesianPoint;

    fn frame(n: usize) -> PointCloudFrame {
        let points = (0..n).map(|i| CartesianPoint { x: i as f64, y: 0.0, z: 0.0, reflectivity: None }).collect();
        PointCloudFrame { index: 3, start_timestamp_us: 9, points }
    }

    #[test]
    fn exact_capacity_is_unchanged() {
        let f = frame(4096);
        for s in [&Subsample { seed: 1 } as &dyn CapacityStrategy, &Partition] {
            assert_eq!(fit_to_capacity(&f, 4096, s), vec![f.clone()]);
        }
    }

    #[test]
    fn partition_sizes() {
        let sizes: Vec<usize> = fit_to_capacity(&frame(10000), 4096, &Partition).iter().map(|f| f.len()).collect();
        assert_eq!(sizes, vec![4096, 4096, 1808]);
    }

    #[test]
    fn subsample_is_seeded() {
        let f = frame(10000);
        let a = fit_to_capacity(&f, 4096, &Subsample { seed: 7 });
        assert_eq!(a, fit_to_capacity(&f, 4096, &Subsample { seed: 7 }));
        assert_ne!(a, fit_to_capacity(&f, 4096, &Subsample { seed: 8 }));
        assert_eq!(a[0].len(), 4096);
        assert!(a[0].points.windows(2).all(|w| w[0].x < w[1].x));
    }

    #[test]
    fn registry_lookup() {
        let r = CapacityRegistry::with_defaults();
        assert_eq!(r.names(), vec!["partition", "subsample"]);
        assert_eq!(r.create("subsample", 1).unwrap().name(), "subsample");
        assert!(matches!(r.create("nope", 0), Err(VelodyneError::UnknownStrategy(_))));
    }
}
