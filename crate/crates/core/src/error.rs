use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: sample {index} is {value} (must be finite and in [0,1])")]
    Validation { index: usize, value: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("training diverged at step {step}: non-finite {what}")]
    Divergence { step: usize, what: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },
}

/// Coarse failure class, used by the command line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Data,
    Runtime,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Format(_)
            | Error::Validation { .. }
            | Error::Contract(_)
            | Error::Config(_)
            | Error::Ingestion(_)
            | Error::Png { .. } => ErrorCategory::Data,
            Error::Divergence { .. } | Error::Io { .. } => ErrorCategory::Runtime,
        }
    }
}
