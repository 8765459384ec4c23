//! Variational contrastive learning with a beta-divergence similarity: a
//! small autodiff engine, the encoder and Gaussian head, the training
//! objective, synthetic multi-label data, the pretraining loop and the
//! evaluation protocols.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod augment;
pub mod autograd;
mod binfmt;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod trainer;

pub use autograd::{Gradients, Scalar, Tape, Tensor, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
