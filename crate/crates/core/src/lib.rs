//! Federated training of bottleneck adapters on a frozen summarization
//! backbone, with per-token entropy-gated knowledge distillation from the
//! aggregated (global) adapters into each client's local adapters.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type. Training runs in `f64`, wire and checkpoint
//! values are `f32`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod selective_kd;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type ParamSet64 = params::ParamSet<f64>;
pub type ParamSet32 = params::ParamSet<f32>;
pub type Summarizer64 = model::Summarizer<f64>;
pub type Summarizer32 = model::Summarizer<f32>;
pub type AdamW64 = tensor::AdamW<f64>;
pub type Federation64 = federation::Federation<f64>;
