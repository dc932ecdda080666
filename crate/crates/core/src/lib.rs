//! Bayesian semiparametric quantile regression for longitudinal and
//! multivariate responses.
//!
//! Population effects are monotone quantile-function basis expansions
//! ([`qfmodel`]); within-subject dependence is a Gaussian copula with AR-1
//! serial correlation, cross-response covariance and random effects
//! ([`copula`]); posterior inference is Metropolis-within-Gibbs with
//! augmentation of missing and right-censored cells ([`inference`]).
//! [`simgen`] generates the two synthetic designs used for coverage studies.

// Parameter checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod copula;
pub mod data;
pub mod dist;
pub mod error;
pub mod inference;
pub mod qfmodel;
pub mod simgen;

pub use basis::{BaseFamily, BasisConfig, BasisSpec, FamilyConfig};
pub use error::{Error, Result};
pub use qfmodel::{FixedEffects, PredictorScaling, ResponseScaling, Weights};
