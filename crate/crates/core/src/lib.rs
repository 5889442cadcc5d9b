//! Incomplete-multimodal fusion Transformer for co-registered raster tiles.

pub mod autograd;
pub mod config;
pub mod container;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod modality;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;
pub use model::{DataShape, Model};

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
