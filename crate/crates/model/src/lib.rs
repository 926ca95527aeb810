//! Sparse-view CBCT as a learned intensity field: a shared hybrid
//! conv/attention encoder over the views, cross-view max fusion of
//! multi-scale features at 3D query points, an optional neighbor-aware point
//! transformer, and a sigmoid attenuation head.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod encoder;
mod error;
pub mod fusion;
pub mod head;
mod layers;
pub mod model;
pub mod pointtrans;
pub mod reconstruct;
pub mod trainer;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use layers::{Conv2d, LayerNorm, Linear};
pub use model::{Model, ModelConfig, ModelVariant};
pub use reconstruct::{reconstruct, Neighbors};
pub use trainer::{Dataset, Scan, Trainer};
