//! Minimal f64 numerics: tensors, tape autodiff, MLPs, an optimizer, and a
//! finite-difference gradient checker.
//!
//! Design goals, in order: exact reproducibility (fixed accumulation orders,
//! no parallel reductions, no hidden global state), verifiability (every
//! backward rule is checkable against [`gradcheck::grad_check`]), and only
//! then speed. Models in this crate are a few thousand parameters, so naive
//! kernels are plenty.

pub mod gradcheck;
pub mod graph;
pub mod mlp;
pub mod optim;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use graph::{Gradients, Graph, NodeId};
pub use mlp::{flatten_params, mlp_gradients, unflatten_params, Activation, Mlp, MlpNodes, ParamBlocks};
pub use optim::{cosine_lr, OptimizerMode, OptimizerState};
pub use tensor::{binary_softmax, sigmoid, softmax_rows, Tensor};
