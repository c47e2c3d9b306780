//! Tensors, reverse-mode differentiation, Adam and finite-difference checks.

mod adam;
mod fd;
pub mod linalg;
mod tape;
mod tensor;

pub use adam::{AdamState, ADAM_EPS, BETA1, BETA2};
pub use fd::{finite_diff_grad, relative_error};
pub use tape::{sigmoid, Gradients, Tape, Var, LOG_CLAMP};
pub use tensor::{softmax_rows, Real, Tensor};
