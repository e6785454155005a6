use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the clustering toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("size mismatch: {points} points but {labels} labels")]
    SizeMismatch { points: usize, labels: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown class id {0}")]
    UnknownClass(u16),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("scheme: line {line}: {reason}")]
    Scheme { line: usize, reason: String },

    #[error("instance placement failed after {attempts} attempts")]
    Placement { attempts: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Coarse category used for machine-readable error reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) | Error::Scheme { .. } => "config",
            Error::ShapeMismatch(_) | Error::SizeMismatch { .. } | Error::Empty(_) => "data",
            Error::UnknownClass(_) => "data",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Placement { .. } => "generation",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
