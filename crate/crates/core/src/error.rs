use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error at {stage}: {detail}")]
    Shape { stage: String, detail: String },
    #[error("{path}: invalid {field}: {detail}")]
    Wav {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },
    #[error("manifest {path}, row {row}, field `{field}`: {detail}")]
    Manifest {
        path: PathBuf,
        row: usize,
        field: &'static str,
        detail: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("optimizer step: {0}")]
    Step(String),
    #[error("training aborted at step {step}: {detail}")]
    Train { step: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
