//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records each operation as it runs; [`Tape::backward`] replays the
//! record in reverse to produce gradients for every leaf created with
//! [`Tape::leaf`]. Values are stored in the tape's scalar type, while sums,
//! means and matrix products accumulate in `f64`.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_fn, GradCheckReport, GradProbe, SignFlipped, TapeFn};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

pub(crate) use tape::sigmoid;
