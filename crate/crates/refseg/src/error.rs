use std::path::PathBuf;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum RefsegError {
    #[error(transparent)]
    Tensor(#[from] tapegrad::TensorError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("checkpoint vocabulary does not match dataset vocabulary: {0}")]
    VocabMismatch(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("training aborted: non-finite loss at epoch {epoch} step {step}; diagnostics at {dump}")]
    NanLoss {
        epoch: usize,
        step: usize,
        dump: PathBuf,
    },
    #[error("{0}")]
    Config(String),
}

impl RefsegError {
    /// Recover the underlying tensor error inside tape-building closures
    /// (gradient checks); panics on any non-tensor failure, which cannot
    /// occur on an already-validated graph.
    pub fn into_tensor_error(self) -> tapegrad::TensorError {
        match self {
            RefsegError::Tensor(t) => t,
            other => panic!("non-tensor error while building a tape: {other}"),
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| RefsegError::Io { context, source }
    }

    pub fn json(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Self {
        let context = context.into();
        move |source| RefsegError::Json { context, source }
    }
}

pub type Result<T> = std::result::Result<T, RefsegError>;
