//! Adversarial examples that transfer across ensembles of small vision models,
//! with the tooling to turn them into psychophysics stimuli and analyse responses.

pub mod analysis;
pub mod attack;
pub mod coarse;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod retina;
pub mod stimuli;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
