//! Dense reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records each forward op together with its output value.
//! [`Tape::backward`] walks the records once in reverse and returns the
//! adjoint of every node that feeds the scalar output.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;
