//! Minimal differentiable numerics: dense `f64` tensors and a gradient tape.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;
