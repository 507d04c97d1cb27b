// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait, clippy::needless_range_loop)]

pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod lora;
pub mod model;
pub mod params;
pub mod pmfa;
pub mod scalar;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autograd::Tape<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type Model = model::Model<f64>;
