pub(crate) mod backward;
mod conv;
mod elementwise;
mod layout;
mod linalg;
mod reduce;
mod sample;
mod shape;

pub use elementwise::{sigmoid_value, softplus_value};
