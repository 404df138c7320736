//! One error type for the whole crate; variants mirror the failure
//! classes the pipeline can actually hit.

use std::path::Path;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed on-disk artifact; names the offending file and field.
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("bad config: {0}")]
    Config(String),
    /// API misuse that is reachable from runtime configuration.
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    pub fn parse(path: &Path, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            msg: msg.into(),
        }
    }
}
