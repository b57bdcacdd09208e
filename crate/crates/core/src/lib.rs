//! Self-supervised pretraining of functional connectivity graph encoders by
//! maximizing hierarchical statistical dependence between augmented views.

pub mod augment;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod connectome;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evalharness;
pub mod objective;
pub mod optim;
pub mod params;
pub mod report;
pub mod rng;
pub mod synthgen;
pub mod tape;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
