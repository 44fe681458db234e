//! Shared fixtures for the criterion benchmarks.

use robdet_core::data::{self, DatasetSpec, LabeledImage};
use robdet_core::model::{DetectorModel, ModelConfig};

pub fn bench_model(seed: u64) -> DetectorModel {
    DetectorModel::init(&ModelConfig::default(), seed).expect("model init")
}

pub fn bench_images(count: usize, seed: u64) -> Vec<LabeledImage> {
    let spec = DatasetSpec {
        count,
        seed,
        ..DatasetSpec::default()
    };
    data::generate(&spec).expect("dataset").0
}
