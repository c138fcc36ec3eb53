//! Network families and fusion blocks.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod params;
pub mod tcl;

use thiserror::Error;

use crate::tensor::TensorError;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{count_blocks, Attention, Family, TopologyConfig};
pub use network::{build_topology, FeatureTriple, ForwardOut, ModelState, Prediction, TripleVars};
pub use params::{Group, Param, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid topology: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
