//! Dense `f64` tensors and a reverse-mode autodiff tape covering the operator
//! set of a small convolutional segmentation decoder: convolution, affine
//! maps, pointwise nonlinearities, pooling, bilinear resizing, reductions and
//! channel softmax. [`grad_check`] verifies any composition of them against
//! central differences.

mod error;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck};
pub use tape::{Binary, Gradients, Pointwise, Reduction, Tape, Var};
pub use tensor::{numel, Tensor};
