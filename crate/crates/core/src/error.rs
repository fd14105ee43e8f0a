//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the numerical kernels, model fitting, and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("cholesky decomposition failed at pivot {pivot} (value {value:.3e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("laplace fit failed for exit {exit}: {reason}")]
    Fit { exit: usize, reason: String },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("ensemble has no members")]
    EmptyEnsemble,

    #[error("{file}: expected {expected} bytes, found {found}")]
    LengthMismatch { file: String, expected: u64, found: u64 },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid data in {file}: {reason}")]
    InvalidData { file: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
