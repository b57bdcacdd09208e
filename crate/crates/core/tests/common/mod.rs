#![allow(dead_code)]

use hfmca::augment::AugmentationConfig;
use hfmca::connectome::EdgeSelection;
use hfmca::dataset::Dataset;
use hfmca::encoder::EncoderConfig;
use hfmca::evalharness::ProbeConfig;
use hfmca::objective::HfmcaConfig;
use hfmca::synthgen::{cohort_to_dataset, generate_cohort, SynthConfig};
use hfmca::trainer::TrainConfig;

pub const REGIONS: usize = 20;

pub fn small_synth(n: usize, delta: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        n_subjects: n,
        n_timepoints: 80,
        class_effect: delta,
        rng_seed: seed,
        ..Default::default()
    }
    .with_even_communities(REGIONS, 4)
}

pub fn small_dataset(name: &str, n: usize, delta: f64, seed: u64) -> Dataset {
    let cohort = generate_cohort(&small_synth(n, delta, seed)).unwrap();
    cohort_to_dataset(&cohort, name, 20, EdgeSelection::Raw, seed).unwrap()
}

pub fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 1e-3,
        encoder: EncoderConfig {
            input_dim: REGIONS,
            hidden_dim: 8,
            n_layers: 1,
            n_attention_heads: 2,
            rwpe_steps: 3,
            embedding_dim: 8,
            dropout: 0.0,
            ..Default::default()
        },
        augmentation: AugmentationConfig {
            n_views: 2,
            ..Default::default()
        },
        hfmca: HfmcaConfig {
            proj_dim: 4,
            ..Default::default()
        },
        seed: 11,
        ..Default::default()
    }
}

pub fn small_probe() -> ProbeConfig {
    ProbeConfig {
        n_runs: 2,
        outer_folds: 3,
        inner_folds: 2,
        probe_epochs: 30,
        ..Default::default()
    }
}
