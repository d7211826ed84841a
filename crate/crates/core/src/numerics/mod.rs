//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use params::{glorot, ParamSet};
pub use tape::{sigmoid, BinaryOp, Gradients, Tape, UnaryOp, Var};
pub use tensor::Tensor;
