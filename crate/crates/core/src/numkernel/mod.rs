//! Dense f64 arrays, a define-by-run differentiation tape, optimizers, a
//! finite-difference gradient checker and the checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions};
pub use graph::{Gradients, Graph, Var};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
