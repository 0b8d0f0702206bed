//! Dense tensors, reverse-mode differentiation, gradient checking and the
//! AdamW optimizer with its learning-rate schedules.

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod schedule;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Segment, Var};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use schedule::{lr_at, ScheduleShape, ScheduleSpec};
pub use tensor::{DType, ParamSet, Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {name}")]
    NonFinite { name: String },
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
