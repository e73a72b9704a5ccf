//! Complexity-adaptive segmentation decoder on a frozen feature pyramid,
//! with the objectives, metrics, synthetic data and training loop around it.

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod corruption;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use error::{DarnError, Result};
