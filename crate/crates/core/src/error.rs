use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the retrieval pipeline.
#[derive(Debug, Error)]
pub enum OreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("budget error: requested {requested} scores with {remaining} remaining")]
    Budget { requested: usize, remaining: usize },

    #[error("refused: {0}")]
    Refused(String),
}

impl OreError {
    /// Short machine-greppable code, stable across releases.
    pub fn code(&self) -> &'static str {
        match self {
            OreError::Io { .. } => "E_IO",
            OreError::Parse { .. } => "E_PARSE",
            OreError::Validation(_) => "E_VALIDATION",
            OreError::Lookup(_) => "E_LOOKUP",
            OreError::Budget { .. } => "E_BUDGET",
            OreError::Refused(_) => "E_REFUSED",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OreError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        OreError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn validation(message: impl Into<String>) -> Self {
        OreError::Validation(message.into())
    }

    pub(crate) fn lookup(message: impl Into<String>) -> Self {
        OreError::Lookup(message.into())
    }
}

pub type Result<T, E = OreError> = std::result::Result<T, E>;
