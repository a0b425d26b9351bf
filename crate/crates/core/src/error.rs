use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error in {op}: id {id} out of range [0, {bound})")]
    Index { op: &'static str, id: usize, bound: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("empty loss: every position is masked")]
    EmptyLoss,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("sequence too long: {what} needs {needed} but the limit is {limit}")]
    Overflow { what: &'static str, needed: usize, limit: usize },

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("{path}:{line}: {detail}")]
    Data { path: PathBuf, line: usize, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
