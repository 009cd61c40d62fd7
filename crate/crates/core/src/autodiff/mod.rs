//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod finite_diff;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_coord, finite_diff_grad, relative_error};
pub use tape::{Adjacency, Gradients, OpKind, Tape, Var, LOGIT_CLAMP};
pub use tensor::Tensor;

pub(crate) use tape::matmul_raw;
