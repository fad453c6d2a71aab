//! Meta-auxiliary 3D GAN inversion on a procedural sphere dataset.

pub mod auxiliary;
pub mod config;
pub mod editing;
pub mod error;
pub mod generator;
pub mod inversion;
pub mod losses;
pub mod meta;
pub mod pipeline;
pub mod renderer;
pub mod scene;
pub mod triplane;

pub use error::{Error, Result};
