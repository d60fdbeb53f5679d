//! Dense `f64` tensors and reverse-mode automatic differentiation.

pub mod check;
pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Mode, Tape, TensorId};
pub use tensor::Tensor;
