//! Compact transformer-encoder masked language model.

mod checkpoint;
mod config;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::ModelConfig;
pub use net::{softmax_vec, LayerParams, MlmModel, ModelError, ParamSet, Scalar};
