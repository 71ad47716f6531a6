//! Error type shared by every module of the simulator.

use std::io;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up; the message names the offending axes.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an operation's contract (non-scalar loss, bad argument).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// Invalid configuration, reported at field level.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed training data (label out of range and similar).
    #[error("data error in sample {sample}: {detail}")]
    Data { sample: usize, detail: String },

    /// Corrupt or truncated binary file.
    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    /// An upload that cannot be aggregated with the others.
    #[error("protocol error from vehicle {vehicle}: {detail}")]
    Protocol { vehicle: usize, detail: String },

    /// Local training diverged.
    #[error("training aborted on vehicle {vehicle} (epoch {epoch}, batch {batch}): {detail}")]
    Training {
        vehicle: usize,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
