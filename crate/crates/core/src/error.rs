use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("index out of bounds at line {line}: {msg}")]
    OutOfBounds { line: usize, msg: String },

    #[error("edge set is empty")]
    EmptyGraph,

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config key {key}: {msg}")]
    Config { key: String, msg: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite values encountered: {0}")]
    NonFinite(String),

    #[error("node {node} out of range (limit {limit})")]
    NodeOutOfRange { node: usize, limit: usize },

    #[error("bad table format: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
