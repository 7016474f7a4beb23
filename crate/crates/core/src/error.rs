use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// Raised when an operation completes with a NaN or infinity in its
    /// output. Values are checked on every operation so the first bad
    /// step is the one reported.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("training failed at episode {episode}: {reason}")]
    Training { episode: usize, reason: String },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("cannot ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
