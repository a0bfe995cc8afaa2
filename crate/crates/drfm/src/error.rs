//! Crate-wide error type.
//!
//! Variants are grouped by how a caller should react: configuration mistakes
//! (bad hyperparameters, out-of-range timesteps, shape mismatches), data
//! problems (unreadable or malformed files), and numerical failures
//! (non-finite values, failed verification gates). The CLI maps these groups
//! onto distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameters or argument combinations.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A timestep index outside the valid range `1..=k_steps`.
    #[error("timestep k = {k} out of range 1..={k_steps}")]
    TimestepOutOfRange { k: usize, k_steps: usize },

    /// Tensor or dataset shapes that do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A file that exists but does not parse as the expected format.
    /// `detail` includes the byte offset of the first offending field where
    /// one can be named.
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    /// An underlying I/O failure, tagged with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A non-finite value surfaced where finite math was required
    /// (loss, gradients, samples, checkpoints).
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A verification check ran to completion and its gate failed.
    #[error("verification gate failed: {0}")]
    GateFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Helper for wrapping `std::io::Error` with the path it concerns.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Helper for format errors.
    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
