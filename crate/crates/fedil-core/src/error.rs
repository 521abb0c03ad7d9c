//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad ranges, infeasible splits, missing data).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input to an operation (label out of range, empty batch, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Malformed on-disk data; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Numerical failure during training (non-finite loss or gradient).
    #[error("training error: {0}")]
    Training(String),

    /// A client/server exchange violated the protocol contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An internal invariant was violated; indicates a bug, not bad input.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Filesystem failure, tagged with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
