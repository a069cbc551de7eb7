use std::path::PathBuf;

use thiserror::Error;

use crate::transmat::MatrixMode;

/// Crate-wide error type. I/O failures are kept distinct from validation
/// failures so callers can map them to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid pyramid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix mode mismatch: expected {expected}, found {found}")]
    ModeMismatch {
        expected: MatrixMode,
        found: MatrixMode,
    },

    #[error("all emission likelihoods underflowed at step {step}")]
    EmissionUnderflow { step: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors that stem from the filesystem rather than the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
