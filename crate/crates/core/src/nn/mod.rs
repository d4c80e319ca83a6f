//! From-scratch neural network stack: tensors, differentiable layers, the
//! five-conv/two-FC driving model with IC blocks (BatchNorm → Dropout before
//! each weight layer), MSE loss, Adam, finite-difference gradient checking,
//! and binary checkpointing.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use gradcheck::{grad_check, grad_check_f32, GradCheckReport};
pub use layers::{
    batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, conv2d_backward,
    conv2d_forward, dropout_backward, dropout_forward, fc_backward, fc_forward, ic_backward,
    ic_forward, relu_backward, relu_forward, update_running_stats, BatchStats, BnParams, BnState,
    DropKind, BN_EPS, BN_MOMENTUM,
};
pub use model::{
    apply_bn_updates, model_backward, model_forward, ConvBlockCfg, ModelCache, ModelConfig,
    ModelGrads, ModelParams,
};
pub use optim::{adam_step, adam_step_tensors, mse_loss, AdamConfig, AdamState};
pub use tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{context}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch { context: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("training batches need at least 2 samples, got {got}")]
    BatchTooSmall { got: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
}

/// Train mode enables dropout and batch-statistics BatchNorm; Eval mode is
/// deterministic and uses the frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Eval,
}
