//! Dense tensors, a tape-based reverse-mode autodiff graph, Adam and the
//! warmup / inverse-square-root learning-rate schedule.
//!
//! Everything here is generic over [`Real`] so the same graph code can be
//! replayed in 64-bit arithmetic when checking gradients against finite
//! differences. Training uses `f32`.

mod adam;
mod checkpoint;
mod graph;
mod real;
mod schedule;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, MaskApplication, Var, MASK_NEG};
pub use real::Real;
pub use schedule::{lr_schedule, ScheduleConfig};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("masked softmax row {row} has no allowed entry")]
    DegenerateRow { row: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cross entropy has no unmasked positions")]
    EmptyLoss,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("gradient for parameter {index} contains a non-finite value")]
    PoisonedGradient { index: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("index {index} out of range for extent {extent} in {op}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, KernelError>;
