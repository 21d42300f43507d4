use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("{0}")]
    Invalid(String),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] octnet_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DetectError>;
