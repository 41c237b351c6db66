//! Quantile-kriging emulation and Bayesian calibration of a stochastic,
//! multivariate simulator.
//!
//! The pipeline runs a replicated simulation ensemble over a space-filling
//! design, reduces each design point's replicates to pointwise quantile
//! curves, emulates those curves with a principal-component basis and
//! independent Gaussian processes over `(θ, α)`, and samples the joint
//! posterior of calibration inputs, discrepancy and GP hyperparameters given
//! observed weekly counts.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod basis;
pub mod calib;
pub mod design;
pub mod epi;
pub mod error;
pub mod gp;
pub mod linalg;
pub mod mcmc;
pub mod pipeline;
pub mod predict;
pub mod quantile;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
