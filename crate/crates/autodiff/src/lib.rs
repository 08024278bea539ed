//! A small dense-tensor engine with reverse-mode differentiation.
//!
//! Everything is `f64`. The [`Tape`] records primitives (matrix products,
//! gathers, reductions, softmax, Huber, a linear solve, ...) and
//! [`Tape::backward`] produces gradients for every leaf. [`grad_check`]
//! compares those gradients with central finite differences, [`adamw_step`]
//! applies updates, and the [`checkpoint`] module stores named tensors.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
mod tape;
mod tensor;

pub use error::{CheckpointError, TensorError};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use optim::{adamw_step, lr_schedule, AdamWConfig, AdamWState};
pub use tape::{huber, tps_kernel_sq, Gradients, Tape, Var};
pub use tensor::Tensor;
