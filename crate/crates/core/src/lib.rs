//! Progressive multi-task affect learning: a small reverse-mode autodiff
//! engine, the model layers, losses and metrics, data handling, the staged
//! training procedure and a strategy search runner.

pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod objectives;
pub mod search;
pub mod seed;
pub mod task;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use task::{HeadKind, TaskKind};
pub use tensor::{finite_diff_check, Gradients, Tape, Tensor, Var};
