use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("label {label} at pixel {pixel} is not in the palette")]
    UnknownLabel { label: i64, pixel: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no labeled samples for task {0}")]
    NoLabels(String),
    #[error("empty auxiliary task set")]
    EmptyAuxiliary,
    #[error("non-finite loss {loss} at step {step} (task {task})")]
    NonFiniteLoss { step: usize, task: String, loss: f64 },
    #[error("zero baseline for task {0}")]
    ZeroBaseline(String),
    #[error("missing metric: {0}")]
    MissingMetric(String),
    #[error("{0}")]
    Precondition(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
