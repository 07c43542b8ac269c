use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("array shape {shape:?} holds {expected} values but {actual} were given")]
    InvalidArray {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: index {index} out of range for axis of size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("no input bound under the name `{0}`")]
    UnboundInput(String),
    #[error("grad_check step must be positive, got {0}")]
    InvalidStep(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn shape_error(op: &'static str, expected: impl Into<String>, actual: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        expected: expected.into(),
        actual: format!("{actual:?}"),
    }
}
