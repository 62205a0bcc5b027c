pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod coupling;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod image;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod pyramid;
pub mod scoring;
pub mod tensor;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use tensor::Tensor;
