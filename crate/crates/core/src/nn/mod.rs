//! Minimal differentiable numerics, optimizers and parameter utilities.

pub mod checkpoint;
mod matrix;
mod optim;
mod param;
mod schedule;
mod tape;

pub use matrix::{log_softmax_rows, log_sum_exp, softmax_rows, Matrix};
pub use optim::{AdamConfig, OptimizerState};
pub use param::{average_params, ParamId, ParamSet, ParamTensor};
pub use schedule::{LrKind, LrSchedule};
pub use tape::{silu, NodeId, Tape};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
