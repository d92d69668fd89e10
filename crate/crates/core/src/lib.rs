//! Deterministic simulator for stateless cross-device federated learning
//! with variational reconstruction of per-client local parameters.

pub mod bounds;
pub mod datagen;
pub mod distributions;
pub mod federation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod tensor;

pub use distributions::{glorot_scale, kl_diag, DiagGaussian};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamBlock, ParamSet};
pub use tensor::{dense_forward, relu, softmax_nll, NnError, Tensor};
