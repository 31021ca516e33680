//! Residual networks that learn a categorical posterior over their own depth.
//!
//! A single forward pass reads the shared output block at every depth, so the
//! evidence lower bound over depth can be evaluated exactly and optimized
//! jointly with the weights. After training the posterior picks a cutoff
//! depth; blocks past it are dropped and predictions marginalize over the
//! remaining depths.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`], [`ops`], [`graph`], [`gradcheck`]: dense tensors and a small
//!   reverse-mode tape.
//! - [`model`]: the residual network and its all-depth forward pass.
//! - [`inference`]: prior, posterior, KL, ELBO, exact posterior, pruning.
//! - [`trainer`]: SGD with momentum and ELBO-based early stopping.
//! - [`data`], [`metrics`]: spirals, file formats, and evaluation.
//! - [`experiments`]: the spiral experiment suite behind the `ldn` binary.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
