//! Sparse adaptation lab.
//!
//! Gradient-based selection of a small learnable parameter subset for a
//! dual-encoder classifier, masked fine-tuning that resets every frozen
//! parameter after each step, the usual baselines (full fine-tuning, linear
//! probing, weight-space interpolation) and a synthetic in-distribution /
//! shifted-distribution benchmark to compare them on.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod select;
pub mod store;
pub mod taskgen;
pub mod train;

pub use error::{Error, Result};
