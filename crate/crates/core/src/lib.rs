pub mod autodiff;
pub mod conditioning;
pub mod conv;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod laplace;
pub mod layers;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Checkpoint64 = train::Checkpoint<f64>;
pub type Checkpoint32 = train::Checkpoint<f32>;
