//! Minimal dense reverse-mode differentiation.
//!
//! A [`Tape`] records each operation of a forward pass; [`Tape::backward`]
//! walks it in reverse and returns gradients for every registered
//! parameter. All values are `f64` 2-D tensors. Ops return an error on shape
//! mismatch or non-finite output.

pub mod check;
mod tape;
mod tensor;

pub use tape::{Axis, Gradients, Segments, Tape, Var, BCE_EPS, COSINE_EPS};
pub use tensor::Tensor;
