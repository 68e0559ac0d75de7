//! Kernel regression for functional data.
//!
//! Dense-grid ([`krfd`]) and ragged-record ([`krsfd`]) models with closed-form Bayesian
//! fitting and predictive distributions, plus comparison baselines, a synthetic benchmark
//! generator and an evaluation harness.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernel;
pub mod krfd;
pub mod krsfd;
pub mod linalg;

pub use error::{Error, Result};
