use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("time pair out of order at row {row}: r = {r} > t = {t}")]
    TimeOrder { row: usize, t: f64, r: f64 },
    #[error("time {value} outside [0, 1] at row {row}")]
    TimeRange { row: usize, value: f64 },
    #[error("batch mismatch: {what} has {got} rows, expected {expected}")]
    Batch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("guidance requires a class label, row {0} is null")]
    NullClassWithGuidance(usize),
    #[error("numeric failure in {stage} at step {step}: {detail}")]
    Numeric {
        stage: &'static str,
        step: usize,
        detail: String,
    },
    #[error("unsupported for {kind}: {what}")]
    Unsupported { kind: String, what: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("incomplete run directory {dir}: missing {missing}")]
    IncompleteRun { dir: String, missing: String },
}

impl Error {
    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.as_ref().display().to_string();
    move |source| Error::Io { path, source }
}
