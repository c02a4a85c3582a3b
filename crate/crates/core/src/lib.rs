pub mod checkpoint;
pub mod data;
pub mod error;
pub mod extractor;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod profile;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Real, Tensor};
