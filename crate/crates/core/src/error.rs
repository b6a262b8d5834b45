//! Crate-wide error type.
//!
//! Numerical failures (non-finite values, gradient-check misses) are kept
//! distinct from configuration and I/O problems so the CLI can map them to
//! different exit codes.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// A forward op produced NaN or Inf. Never silently propagated.
    #[error("non-finite values produced by forward op `{op}`")]
    NonFinite { op: &'static str },

    /// A backward op produced NaN or Inf.
    #[error("non-finite gradient produced by backward of `{op}`")]
    NonFiniteGrad { op: &'static str },

    /// The tape was already consumed by a backward pass; re-run forward first.
    #[error("tape already consumed by a backward pass; record a new forward pass")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("value id {0} does not belong to this tape")]
    InvalidValueId(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// True for failures of numerical origin (used for CLI exit code 3).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteGrad { .. } | Error::Numerical(..)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
