//! Spatial autoregressive coding (SAC) for user–item bipartite graphs.
//!
//! A target node's embedding is learned by masking one sampled neighbor at
//! every hop of its neighborhood, encoding the rest with a Transformer, and
//! scoring the masked neighbors against easy and random-walk hard negatives.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file name the common instantiations.

mod config;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod kernels;
pub mod negatives;
pub mod objectives;
pub mod sampler;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use config::ConfigError;
pub use encoder::{EncoderConfig, ModelParams};
pub use eval::{evaluate, EvalConfig, MetricsReport};
pub use graph::{BipartiteGraph, GraphError, GraphStats, NodeId, NodeKind};
pub use kernels::{KernelError, Tape, Tensor, Var};
pub use negatives::WalkConfig;
pub use objectives::LossConfig;
pub use sampler::SamplerConfig;
pub use scalar::Scalar;
pub use trainer::{Checkpoint, TrainConfig, TrainError, Trainer};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Trainer32<'g> = Trainer<'g, f32>;
pub type Trainer64<'g> = Trainer<'g, f64>;
