//! Contrastive captioner models at desk scale: configuration, model graph,
//! losses, synthetic data, training and downstream evaluation.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod report;
pub mod train;

pub use config::{CoCaConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{CoCa, ForwardOutputs};
