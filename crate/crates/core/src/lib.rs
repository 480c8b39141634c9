//! Multi-scale temporal phase recognition for surgical video.

pub mod backbone;
pub mod data;
pub mod error;
pub mod mtam;
pub mod mtfe;
pub mod nn;
pub mod sampler;
pub mod scalar;
pub mod tcm;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Mtfe64 = mtfe::Mtfe<f64>;
pub type Mtfe32 = mtfe::Mtfe<f32>;
pub type Tcm64 = tcm::Tcm<f64>;
pub type Tcm32 = tcm::Tcm<f32>;
pub mod config;
pub mod eval;
pub mod pipeline;
pub mod train;
