use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("ambiguous input: {0}")]
    Ambiguity(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("search failed: {0}")]
    Search(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Dimension { .. }
            | Error::Empty(_)
            | Error::Ambiguity(_)
            | Error::Search(_) => 2,
            Error::Io { .. } => 3,
            Error::UndefinedMetric(_) => 4,
            Error::Format(_) | Error::Truncated(_) | Error::Json(_) | Error::Csv(_) => 5,
        }
    }
}
