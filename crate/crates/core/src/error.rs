use std::path::PathBuf;

use thiserror::Error;
use xdomain_numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("synthetic spec: {0}")]
    SyntheticSpec(String),
    #[error("split: {0}")]
    Split(String),
    #[error("prompt: {0}")]
    Prompt(String),
    #[error("model config: {0}")]
    ModelConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("sequence of length {len} exceeds max positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config mismatch in `{field}`: expected {expected}, found {found}")]
    ConfigMismatch {
        field: String,
        expected: String,
        found: String,
    },
    #[error("loss: {0}")]
    Loss(String),
    #[error("training: {0}")]
    Training(String),
    #[error("experiment: {0}")]
    Experiment(String),
    #[error("saliency: {0}")]
    Saliency(String),
    #[error("config: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
