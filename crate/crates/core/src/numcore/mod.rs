//! Dense tensors, reverse-mode autodiff and optimizer math.

pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Mode, Var};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};
pub use params::{checkpoint_paths, BoundParams, ParamTree};
pub use tensor::{DType, Real, Tensor};
