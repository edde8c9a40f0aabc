//! Skill-adapter knowledge injection for a tiny byte-level transformer.
//!
//! The pipeline has two stages. Stage one trains one low-rank adapter per
//! skill against a frozen base model, with SVD-shaped factors whose singular
//! values are pruned under a decaying budget. Stage two learns a softmax
//! router that mixes the trained adapters for a downstream task, either by
//! gradient descent on the router parameters or, when only a handful of
//! examples exist, by evolutionary search. A fused model folds the routed
//! mixture back into the base weights for adapter-free inference.
//!
//! All dense math is generic over [`Scalar`] (`f32` or `f64`); concrete
//! aliases live at the crate root. Every source of randomness flows through
//! [`rng::SeedRng`], so runs are reproducible byte for byte.

// TEMP: modules are uncommented as they land during the bottom-up build.
pub mod adalora;
pub mod checkpoint;
pub mod cmaes;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod router;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

/// 32-bit tensor, the training default.
pub type Tensor32 = tensor::Tensor<f32>;
/// 64-bit tensor, used for verification paths.
pub type Tensor64 = tensor::Tensor<f64>;
/// 32-bit autodiff tape.
pub type Tape32 = tape::Tape<f32>;
/// 64-bit autodiff tape.
pub type Tape64 = tape::Tape<f64>;
/// 32-bit base model weights.
pub type Weights32 = model::TransformerWeights<f32>;
/// 64-bit base model weights.
pub type Weights64 = model::TransformerWeights<f64>;
