//! Shared fixtures for the pipeline benchmarks.

use tinycount::backends::{SyntheticDensity, SyntheticDetector, SyntheticErrorModel};
use tinycount::synthgen::{generate_dataset, Dataset, SceneSpec};
use tinycount::KernelConfig;

/// A fixed-seed dataset with its synthetic backends.
pub fn fixture(spec: &SceneSpec, images: usize, seed: u64) -> (Dataset, SyntheticDetector, SyntheticDensity) {
    let ds = generate_dataset(spec, images, seed, None).expect("fixture spec is feasible");
    let model = SyntheticErrorModel::default().with_seed(seed);
    let det = SyntheticDetector::new(model, &ds.scenes);
    let den = SyntheticDensity::new(model, KernelConfig::default(), 8, &ds.scenes);
    (ds, det, den)
}
