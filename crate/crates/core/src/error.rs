use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("grid header is missing key `{0}`")]
    MissingKey(&'static str),
    #[error("dimension error: expected {expected} values, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("schema error at row {row}: expected {expected} columns, found {found}")]
    Schema {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("label error at row {row}: `{label}` is not 0 or 1")]
    Label { row: usize, label: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("normalizer underflow at node {node} ({stage})")]
    Underflow { node: usize, stage: &'static str },
    #[error("initialization error: {0}")]
    Initialization(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("scene error: {0}")]
    Scene(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("EM iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
