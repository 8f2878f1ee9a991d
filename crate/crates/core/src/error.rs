// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or activation dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A layer, position, head, feature, or token index is out of range.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// Caller supplied an argument outside the operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A container, manifest, or dataset file is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found}; supported versions: {supported:?}")]
    Version { found: u32, supported: Vec<u32> },

    /// Not enough data to satisfy the request (dataset exhausted, window too short).
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Ratio or statistic with a zero denominator.
    #[error("degenerate: {0}")]
    Degenerate(String),

    /// Training produced a non-finite loss, or its smoothed loss kept rising.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("missing file {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path: path.into() }
        } else {
            Error::Io {
                path: path.into(),
                source,
            }
        }
    }
}
