pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod kv;
pub mod localpod;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod pseudolabel;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type SegNet = model::SegNet<f64>;
pub type EntropyThresholds = pseudolabel::EntropyThresholds<f64>;
