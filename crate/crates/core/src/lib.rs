//! Continual personalization of a toy conditional diffusion model with
//! diffusion-classifier (DC) scores.
//!
//! The numeric substrate ([`tensor`], [`linalg`], [`metrics::mmd2`]) is generic
//! over [`Scalar`]; the training stack runs on `f64` through the aliases below.

pub mod config;
pub mod data;
pub mod dcscores;
pub mod diffusion;
pub mod dsc;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod persist;
pub mod regularizers;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod workflow;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type of the training stack.
pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Parameter = tensor::Parameter<Real>;
pub type Graph = tensor::Graph<Real>;
pub type Gradients = tensor::Gradients<Real>;
