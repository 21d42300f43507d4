use thiserror::Error;

#[derive(Debug, Error)]
pub enum DegradeError {
    #[error("invalid specification: {0}")]
    Spec(String),
    #[error("{0}")]
    Image(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Tensor(#[from] octnet_tensor::TensorError),
    #[error(transparent)]
    Detect(#[from] octnet_detect::DetectError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DegradeError>;

pub(crate) fn spec(msg: impl Into<String>) -> DegradeError {
    DegradeError::Spec(msg.into())
}
