//! Autoregressive token-grid generation with foresight alignment.
//!
//! A decoder-only transformer is trained by next-token prediction on raster-
//! ordered token grids. During training its intermediate states can be
//! aligned to features that see future positions: an EMA copy of the model
//! evaluated at nearby grid positions, or a frozen bidirectional encoder.
//! Sampling only ever uses the causal backbone.

pub mod alignment;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod render;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use alignment::{ForesightConfig, ForesightMode};
pub use backbone::{ArModel, ModelConfig};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use corpus::{CorpusConfig, TokenGrid};
pub use error::{Error, Result};
pub use geometry::{GridShape, Layout};
pub use sampler::SampleParams;
pub use trainer::{ArState, TrainConfig, Trainer};
