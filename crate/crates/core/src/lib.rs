pub mod appearance;
pub mod autograd;
pub mod data;
pub mod error;
pub mod generator;
pub mod harness;
pub mod keypoints;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod primitives;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
