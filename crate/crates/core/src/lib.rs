//! Training laboratory for the flooding regularizer.
//!
//! Flooding replaces a training objective `J` with `|J - b| + b` for a flood
//! level `b >= 0`: above `b` the optimizer descends as usual, below it the
//! gradient flips and the optimizer ascends, so the training loss hovers
//! around `b` instead of collapsing to zero.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense ReLU networks with exact forward/backward passes and a
//!   finite-difference gradient oracle.
//! - [`objectives`]: zero-one, logistic and softmax cross-entropy losses,
//!   empirical risk and the flooded transform.
//! - [`optim`]: SGD with momentum, Adam, coupled weight decay and step-wise
//!   learning-rate decay.
//! - [`data`]: synthetic generators (two Gaussians, sinusoid, spiral), label
//!   noise, splits and IDX ingestion.
//! - [`trainer`]: the mini-batched flooding loop with per-epoch metrics and
//!   early-stopping selection.
//! - [`experiments`]: flood-level sweeps, Welch's t-test, the Monte Carlo
//!   check of the flooded estimator's MSE, and the memorization, gradient-norm
//!   and flatness diagnostics.
// `!(x > 0.0)` style checks are deliberate: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiments;
pub mod io;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod seeds;
pub mod trainer;

pub use error::{FloodError, Result};
