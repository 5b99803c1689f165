//! Row-major tensors and a minimal reverse-mode autodiff tape.

mod attention;
mod backward;
mod element;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod rotary;
mod tensor;

pub use attention::SparseMask;
pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var, BLOCKED};
pub use rotary::RotaryTable;
pub use tensor::Tensor;
