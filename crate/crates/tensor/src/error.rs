use crate::Shape;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("{op}: input {index} has shape {found}, incompatible with {expected}")]
    ConcatMismatch {
        op: &'static str,
        index: usize,
        found: Shape,
        expected: Shape,
    },

    #[error("{op}: non-integer output extent ({detail})")]
    NonIntegerExtent { op: &'static str, detail: String },

    #[error("{op}: extent {extent} is not divisible by {factor}")]
    Indivisible {
        op: &'static str,
        extent: usize,
        factor: usize,
    },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },

    #[error("loss must be a single scalar, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Self::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
