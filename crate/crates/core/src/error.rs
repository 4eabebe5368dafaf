use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {len} samples, need at least {needed}")]
    InputTooShort { len: usize, needed: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular noise covariance at bin {bin}")]
    SingularCovariance { bin: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("CTC alignment infeasible: {frames} frames cannot emit {labels} labels with {repeats} repeats")]
    InfeasibleAlignment {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("unsupported wav format in {path}: {reason}")]
    WavFormat { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in the filesystem.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::WavFormat { .. })
    }
}
