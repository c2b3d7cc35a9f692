//! Minimal deterministic reverse-mode automatic differentiation over dense
//! `f32` tensors: just enough for small convolutional detectors and
//! input-gradient attacks.

pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{Param, ParamStore, CHECKPOINT_MAGIC};
pub use tape::{Gradients, Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;
