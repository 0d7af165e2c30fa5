use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// An operand has the wrong extent along a named axis.
    #[error("{op}: {axis} mismatch (expected {expected}, got {got})")]
    AxisMismatch {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

impl TensorError {
    pub(crate) fn axis(op: &'static str, axis: impl Into<String>, expected: usize, got: usize) -> Self {
        TensorError::AxisMismatch {
            op,
            axis: axis.into(),
            expected,
            got,
        }
    }

    pub(crate) fn shape(op: &'static str, shape: &[usize], reason: impl Into<String>) -> Self {
        TensorError::BadShape {
            op,
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            reason: reason.into(),
        }
    }
}
