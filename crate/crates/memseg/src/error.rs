//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by tensor ops, model components and dataset IO.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; the message reports both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Invalid runtime input (e.g. out-of-range class label).
    #[error("invalid input: {0}")]
    Input(String),

    /// An operation was called in the wrong state (e.g. backward before forward).
    #[error("invalid state: {0}")]
    State(String),

    /// File IO failure, naming the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk data (PNM images, tensor containers).
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Dataset manifest inconsistency.
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
