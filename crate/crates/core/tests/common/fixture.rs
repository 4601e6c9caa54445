//! The end-to-end fixture: a small model trained on synthetic series.

use vetime_core::encoders::EncoderConfig;
use vetime_core::model::ModelConfig;
use vetime_core::series::MultivariateSeries;
use vetime_core::synthetic::{generate_all, GeneratorConfig};
use vetime_core::train::{OptimizerConfig, RunConfig};

pub const TRAIN_SEED: u64 = 100;
pub const HELD_OUT_SEED: u64 = 200;

/// Mixed point and context anomalies, lengths 256 to 512.
pub fn generator(n_series: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_series,
        length_range: [256, 512],
        anomaly_rate: 0.05,
        seed,
        ..Default::default()
    }
}

pub fn series(n_series: usize, seed: u64) -> Vec<MultivariateSeries> {
    generate_all(&generator(n_series, seed))
        .expect("valid generator")
        .into_iter()
        .map(|g| g.series.into())
        .collect()
}

pub fn toy_encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        heads: 4,
        model_dim: 32,
        ffn_dim: 64,
        visual_patch: 16,
        seed,
    }
}

/// Toy model trained for at most 10 epochs with single-series steps.
pub fn run_config(seed: u64) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            encoder: toy_encoder(seed),
            patch_size: 8,
            max_patches: 64,
            ..Default::default()
        },
        optimizer: OptimizerConfig {
            learning_rate: 1e-3,
            batch_size: 1,
            max_epochs: 10,
            ..Default::default()
        },
        ..Default::default()
    }
    .with_seed(seed)
}
