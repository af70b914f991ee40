use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("reference tensor has zero norm")]
    DegenerateReference,

    /// Normal equations of an ALS subproblem are singular. Indices are 0-based.
    #[error("singular normal equations for term {term}, mode {mode} (set a positive ridge)")]
    Singular { term: usize, mode: usize },

    #[error("refused: {0}")]
    Refused(String),

    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("parse error at position {pos}: {reason}")]
    Parse { pos: usize, reason: String },

    #[error("unknown architecture {name:?}; known: {}", known.join(", "))]
    UnknownArch { name: String, known: Vec<String> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Self::Argument(msg.into())
    }

    pub(crate) fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical procedure itself, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::Singular { .. } | Self::NonFinite { .. })
    }
}
