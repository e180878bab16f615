use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("sampling design error: {0}")]
    Design(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("singular design: {0}")]
    Singular(String),

    #[error("model not identifiable: {0}")]
    Identifiability(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bootstrap failed: {0}")]
    Bootstrap(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
