//! Minimal differentiable kernel: dense tensors, a reverse-mode tape, and
//! the attention and transformer blocks the model is built from.

mod attention;
pub mod checkpoint;
pub mod fastmath;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use layers::Forward;
pub use ops::{linear, scaled_attention, softmax, transformer_layer};
pub use params::ParamStore;
pub use tape::{Segment, Tape, Var};
pub use tensor::Tensor;
