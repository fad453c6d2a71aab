//! Dense f64 tensors with tape-based reverse-mode differentiation,
//! including gradients of gradients, plus a small functional layer and
//! optimizer library built on top.

pub mod check;
mod error;
pub mod io;
pub mod nn;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{grad, Gradients, Tape};
pub use tensor::{numel, Tensor};

/// Numerically stable scalar helpers matching the tensor activations.
pub mod scalar {
    pub use crate::ops::{sigmoid_value as sigmoid, softplus_value as softplus};
}
