//! Reverse-mode automatic differentiation over 2-D tensors.

mod graph;
pub mod kernels;
mod optim;
mod params;

pub use graph::{sigmoid, softplus, AttnSpec, Graph, Var};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{Gradients, Mat, ParamId, ParamStore};
