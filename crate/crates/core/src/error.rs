use std::path::PathBuf;

use sacflow_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dim {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value at {what} (step {step})")]
    NonFinite { what: String, step: u64 },

    #[error("config error for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("replay buffer holds {have} transitions, {need} required")]
    NotEnoughData { have: usize, need: usize },

    #[error("environment error: {0}")]
    Env(String),

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by NaN/inf values during training.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Autodiff(AutodiffError::NonFinite { .. })
        )
    }
}

impl From<Error> for AutodiffError {
    fn from(e: Error) -> Self {
        match e {
            Error::Autodiff(inner) => inner,
            other => AutodiffError::External(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
