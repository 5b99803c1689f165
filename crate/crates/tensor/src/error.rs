use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("softmax_masked: row {row} is fully blocked")]
    BlockedRow { row: usize },

    #[error("backward: root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}
