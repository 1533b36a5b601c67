//! Dense tensors with reverse-mode differentiation.
//!
//! Values are `f64` row-major arrays. Every operation on a [`Var`] records a
//! node on its [`Graph`]; [`Graph::backward`] walks the nodes in reverse and
//! accumulates gradients additively over fan-out.

mod graph;
pub mod gradcheck;
pub mod nn;
mod ops;
pub mod optim;

pub use graph::{Gradients, Graph, Var};
pub use nn::{conv2d, dense, resize_bilinear, Conv2d, Dense, LayerNorm, Padding, ParamId, ParamStore};
pub use ops::{elu, inv_softplus, sigmoid, softplus};
pub use optim::{lr_schedule, Adam, AdamConfig, AdamState, MultiStepLr};

/// Dense n-dimensional array of `f64`.
pub type Tensor = ndarray::ArrayD<f64>;
