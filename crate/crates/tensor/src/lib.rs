//! Deterministic f64 tensors with reverse-mode automatic differentiation.
//!
//! The op set is deliberately small: exactly what a ViT encoder, a small
//! CNN, cross-attention adapters and a correlation loss need.

mod error;
pub mod gradcheck;
pub mod kernels;
mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_directional, finite_diff_grad, relative_error};
pub use rng::{Rng, RNG_ALGORITHM};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Init, Tensor};
