//! Temporal conditional variational autoencoder for online skeletal motion
//! prediction, future sampling, end-point goal inference and latent-space
//! analysis, together with a deterministic synthetic corpus generator.

pub mod baseline;
pub mod cvae;
pub mod error;
pub mod exec;
pub mod latent;
pub mod nn;
pub mod predictor;
pub mod skeleton;
pub mod synth;
pub mod target;
pub mod trainer;

pub use error::{Error, Result};
