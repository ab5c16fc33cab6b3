use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record {record}: {message}")]
    Load { record: String, message: String },

    #[error("invalid instance {id}: {message}")]
    Validation { id: String, message: String },

    #[error("rule file line {line}: {message}")]
    RuleSyntax { line: usize, message: String },

    #[error("invalid rule {id}: {message}")]
    RuleValidation { id: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds maximum of {max}")]
    Truncation { len: usize, max: usize },

    #[error("non-finite {what} in batch {batch}")]
    NonFinite { what: String, batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
