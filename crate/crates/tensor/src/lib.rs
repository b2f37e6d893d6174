//! Dense `f32` tensors and a small reverse-mode autodiff tape.
//!
//! Every operation lives in [`ops`] and takes the [`Tape`] it records onto.
//! A tape built with [`Tape::inference`] records nothing, so the same model
//! code serves both generation and training.

pub mod check;
mod error;
pub mod ops;
mod tape;
mod tensor;

pub use check::{gradcheck, GradCheck};
pub use error::TensorError;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
