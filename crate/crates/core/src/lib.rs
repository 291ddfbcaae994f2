//! Meta-learning causal representation learner.
//!
//! The crate bundles a small second-order autodiff engine, the learner's
//! parameterised components, the disentangling and causal objectives, the
//! bi-level meta-trainer, synthetic task generators, and a lab for probing
//! spurious cross-task correlations.

pub mod autodiff;
pub mod causal;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod lab;
pub mod meta;
pub mod models;
pub mod rng;
pub mod tasks;

pub use autodiff::{Graph, ParamSet, Tensor, TensorError};
