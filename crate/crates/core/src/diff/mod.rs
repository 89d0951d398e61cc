//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod check;
mod graph;
mod param;
mod tensor;

pub use check::{finite_difference_check, relative_error, GradCheckReport, ParamCheck, ABS_FLOOR};
pub use graph::{BatchNormMode, BatchStats, Gradients, Graph, Var, BATCHNORM_EPS};
pub use param::{ParamSet, Parameter};
pub use tensor::Tensor;
