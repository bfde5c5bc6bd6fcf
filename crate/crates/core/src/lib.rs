//! Toy laboratory for sharpness-aware minimization and feature learning.
//!
//! The crate trains a disentangled two-feature network on a linear-plus-spiral
//! dataset with SGD, SAM or last-layer SAM, and instruments the per-example
//! importance weights and per-feature step sizes that the perturbation
//! induces.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod diffcore;
pub mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod toydata;

pub use diffcore::{Gradient, ParamVector, Tensor};
pub use error::{Error, Result};
pub use model::{FeaturePair, ModelState};
pub use optim::{LossKind, PhantomState, TrainConfig, TrainMode};
pub use toydata::{NoiseSpec, NoiseTarget, ToyDataset, ToySample, ToySpec};
