//! Dense `f64` tensors with reverse-mode differentiation.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use kernels::{descending_rank, ConvGeom, NORM_EPS};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("expected a single-element output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        TensorError::Shape { op, detail }
    }
}
