//! Likelihood ratio tests for variance components in mixed-effects models.
//!
//! When a variance is tested against zero the null hypothesis sits on the
//! boundary of the parameter space and the usual chi-square asymptotics do
//! not apply: the LRT statistic converges to a chi-bar-square distribution,
//! a mixture of chi-square distributions whose weights depend on the Fisher
//! information and on a closed convex cone determined by the two nested
//! models. This crate computes that limiting distribution for any
//! block-diagonal random-effect covariance structure: cone construction,
//! Monte Carlo weight estimation, p-values and distribution-free p-value
//! bounds. It ships a maximum-likelihood linear mixed-model fitter and also
//! accepts fit summaries of models estimated elsewhere.

pub mod chibarsq;
pub mod cli;
pub mod cone;
pub mod data;
pub mod engine;
pub mod fim;
pub mod lmm;
pub mod structure;

mod error;
mod optim;

pub use error::{Error, Result};
