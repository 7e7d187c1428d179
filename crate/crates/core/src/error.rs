use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry mismatch: expected {expected}, got {actual}")]
    Dimension { expected: String, actual: String },

    #[error("event ({x}, {y}) lies outside the {width}x{height} sensor")]
    OutOfGeometry {
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },

    #[error("timestamp {t} is outside the binning range: {reason}")]
    Range { t: u64, reason: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("ratio is undefined: {0}")]
    UndefinedRatio(String),

    #[error("score out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite {what} at epoch {epoch} in `{layer}`")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        layer: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
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

    pub(crate) fn dimension(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
