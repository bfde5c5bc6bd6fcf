//! Minimal reverse-mode differentiation: affine maps, layer normalization,
//! rectifiers and the two margin losses, all in `f64`.

mod fd;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use fd::finite_diff_gradient;
pub use graph::{
    affine_forward, exponential_loss, layer_norm_forward, logistic_loss, Graph, NodeId,
};
pub use kernels::{sigmoid, softplus};
pub use params::{Gradient, ParamVector};
pub use tensor::Tensor;
