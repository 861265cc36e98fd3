//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used by every fallible operation in the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A gradient or loss became non-finite during optimisation. Carries the
    /// last parameter snapshot that was still finite, when one exists.
    #[error("training diverged at iteration {iteration}: {detail}")]
    TrainingDiverged {
        iteration: u64,
        detail: String,
        last_good: Option<Box<crate::nn::Mlp>>,
    },

    /// An ODE or ancestral sampling trajectory left the finite range.
    #[error("integration diverged at step {step}: {detail}")]
    IntegrationDiverged { step: usize, detail: String },

    /// A file did not match the expected on-disk layout.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// The requested combination of options is not implemented.
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
