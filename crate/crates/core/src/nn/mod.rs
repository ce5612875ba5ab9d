//! Reverse-mode automatic differentiation and the dense regression network.

mod adam;
pub mod checkpoint;
mod densenet;
mod graph;
pub mod kernels;
mod scalar;
mod tensor;
mod train;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use densenet::{
    BatchStats, DenseNet, DenseNetConfig, ForwardOutput, Mode, Param, RunningStats,
};
pub use graph::{Backend, Eager, Gradients, Graph, Var};
pub use kernels::{l2_loss, log_cosh, log_cosh_loss};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{
    batch_inputs, batch_targets, evaluate_loss, patch_tensor, train, EpochStats, LossKind, TrainConfig,
    TrainReport,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tensor rank {0} unsupported (1 to 4)")]
    Rank(usize),
    #[error("data length {actual} does not match shape volume {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label width {labels} does not match network outputs {outputs}")]
    NcMismatch { labels: usize, outputs: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
