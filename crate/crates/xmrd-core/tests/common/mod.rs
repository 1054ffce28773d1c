//! Shared fixtures for the integration suites: a mid-size synthetic
//! benchmark, the default architecture, and short training configs.

#![allow(dead_code)]

use xmrd_core::config::RunConfig;
use xmrd_core::dataset::{Dataset, Payload, SyntheticSpec};
use xmrd_core::text::{build_dictionary, Dictionary};
use xmrd_core::train::{ModelArch, TrainConfig};

/// Synthetic benchmark slice: 4 samples per identity per modality, 6 latent
/// coordinates, 16-dim vision payloads matching the default architecture.
pub fn synth_spec(identity_count: usize, noise_sigma: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        identity_count,
        samples_per_identity_per_modality: 4,
        latent_dim: 6,
        vision_dim: 16,
        text_vocab: 120,
        noise_sigma,
        seed,
        quantization_levels: 16,
        distractors_per_sentence: 3,
    }
}

pub fn bench_arch() -> ModelArch {
    RunConfig::default().arch
}

/// Short schedule with a hotter learning rate than the full-run default so
/// trends emerge within a few epochs.
pub fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        learning_rate: 0.05,
        decay_period: epochs.max(1),
        ..TrainConfig::default()
    }
}

pub fn dict_of(ds: &Dataset, min_count: usize) -> Dictionary {
    let corpus: Vec<&str> = ds
        .samples()
        .iter()
        .filter_map(|s| match &s.payload {
            Payload::Text(t) => Some(t.as_str()),
            Payload::Vision(_) => None,
        })
        .collect();
    build_dictionary(&corpus, min_count).expect("synthetic corpus is valid")
}
