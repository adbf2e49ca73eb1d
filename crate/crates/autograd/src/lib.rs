//! Dense `f64` tensors and a define-by-run tape for reverse-mode
//! differentiation.
//!
//! A [`Graph`] records every operation applied to the [`Var`] handles it
//! hands out. Calling [`Graph::backward`] on a scalar node replays the
//! recorded backward rules in reverse order and accumulates gradients into
//! every leaf created with `requires_grad = true`.
//!
//! Broadcasting is limited to scalar operands (a tensor with one element).
//! Row-wise bias addition has its own op, [`Graph::add_row`].

mod error;
mod graph;
mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
