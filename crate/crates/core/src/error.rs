use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure{}: {message}", iteration.map(|t| format!(" at iteration {t}")).unwrap_or_default())]
    Numeric {
        message: String,
        iteration: Option<usize>,
    },

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error in {path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported format in {path}: {message}")]
    Version { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>, iteration: Option<usize>) -> Self {
        Error::Numeric {
            message: msg.into(),
            iteration,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Domain(_) | Error::UndefinedMetric(_) => 2,
            Error::Json(_) => 2,
            Error::Numeric { .. } => 3,
            Error::Parse { .. } | Error::Version { .. } | Error::Io { .. } => 4,
        }
    }

    /// Attach an iteration index to a numeric error raised below the training loop.
    pub(crate) fn at_iteration(self, t: usize) -> Self {
        match self {
            Error::Numeric {
                message,
                iteration: None,
            } => Error::Numeric {
                message,
                iteration: Some(t),
            },
            other => other,
        }
    }
}
