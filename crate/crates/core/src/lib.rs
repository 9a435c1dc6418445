//! Quantization-aware training lab: autodiff, fake quantization, reverse
//! pruning, curriculum and an integer-only inference simulator.

pub mod autograd;
pub mod backend;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod observer;
pub mod prune;
pub mod quant;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type QuantParams64 = quant::QuantParams<f64>;
pub type QuantParams32 = quant::QuantParams<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
