//! A desk-scale laboratory for training and comparing score-based denoisers,
//! DDPM-style denoisers, flow-matching velocity fields, rectified flows, and
//! few-step endpoint predictors on synthetic Gaussian-mixture targets.
//!
//! Everything runs on the CPU in `f64`. Model evaluation and training are
//! deterministic for a fixed seed, independent of thread count.

pub mod dist;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pairing;
pub mod sampler;
pub mod sched;
pub mod train;

pub use error::{Error, Result};
