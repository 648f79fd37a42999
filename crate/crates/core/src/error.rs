use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("input of {len} tokens exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("embedding is not unit norm (norm {0})")]
    NotUnit(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("freeze spec: unknown token `{0}`")]
    FreezeToken(String),
    #[error("freeze spec: block {index} out of range for {blocks} blocks")]
    BlockOutOfRange { index: usize, blocks: usize },
    #[error("freeze spec: suffix `{0}` matches no parameter")]
    DanglingSuffix(String),

    #[error("invalid optimizer setting: {0}")]
    Optimizer(String),
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("scheduler step {t} beyond horizon {total}")]
    SchedulerRange { t: u64, total: u64 },

    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("tuning: {0}")]
    Tuning(String),

    #[error("metric: {0}")]
    Metric(String),
    #[error("grid: {0}")]
    Grid(String),
    #[error("data: {0}")]
    Data(String),
    #[error("config: {0}")]
    Settings(String),
    #[error("lab: {0}")]
    Lab(String),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
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
