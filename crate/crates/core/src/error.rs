use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DiscError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DiscError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DiscError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = DiscError> = std::result::Result<T, E>;
