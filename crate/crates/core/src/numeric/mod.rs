//! Dense double-precision tensors, reverse-mode differentiation and Adam.

pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use params::{AdamConfig, Bound, ParamId, ParameterSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{log_softmax, sigmoid, softmax, Tensor};
pub(crate) use tensor::dot;
