pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod conditioner;
pub mod datakit;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod vision;
pub mod tokenizer;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
