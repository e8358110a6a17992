//! Tensors, the autodiff tape and finite-difference gradient checking.

pub mod gradcheck;
pub mod kernels;
pub mod scan;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use kernels::ConvSpec;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
