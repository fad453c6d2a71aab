//! Layers, parameter collections and optimizers.

mod layers;
mod optim;
mod param;

pub use layers::{bias_key, weight_key, Conv2d, FiLMBlock, Init, Linear};
pub use optim::{sgd_step, Adam, AdamConfig};
pub use param::{ParamSet, CKPT_MAGIC};
