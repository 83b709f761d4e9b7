use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, unknown names, schema mismatches.
    #[error("configuration error: {0}")]
    Config(String),

    /// Missing, truncated or corrupt input files.
    #[error("ingestion error for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    /// A caller broke an operation's precondition (e.g. noising a noisy bundle).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid argument values: empty inputs, mismatched lengths.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error in {term}: {detail}")]
    Numerical { term: String, detail: String },

    #[error("conflicting results: {0}")]
    Conflict(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn ingestion(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingestion { path: path.into(), reason: reason.into() }
    }

    pub fn numerical(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical { term: term.into(), detail: detail.into() }
    }
}
