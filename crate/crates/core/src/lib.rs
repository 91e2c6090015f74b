//! Segmentation engine built around a bidirectional selective-scan block.

pub mod autodiff;
pub mod bench;
pub mod bsb;
pub mod checks;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod model;
pub mod objective;
pub mod params;
pub mod rng;
pub mod seq2d;
pub mod ssm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
