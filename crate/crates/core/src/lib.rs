//! Scale-aware image restoration engine.
//!
//! The crate bundles a minimal tensor/autodiff core, a fractional
//! feature up-sampler driven by scale priors, a windowed-transformer
//! embedding stage, a small modulated decoder, the synthetic degradation
//! pipeline, full-reference quality metrics, and a deterministic trainer.

pub mod degrade;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod kernels;
pub mod objective;
pub mod rng;
pub mod tape;
#[cfg(test)]
mod tape_tests;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tape::{SampleCoords, Tape, TensorId};
pub use tensor::Tensor;
