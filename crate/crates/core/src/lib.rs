//! Conditional Shapley values by exact coalition enumeration.
//!
//! The crate is organised around a small pipeline:
//!
//! 1. a [`PredictiveModel`](model::PredictiveModel) `f` and a training [`Dataset`](data::Dataset),
//! 2. a [`ContributionEstimator`](estimator::ContributionEstimator) that approximates
//!    `v(S) = E[f(x) | x_S = x*_S]` for every nontrivial coalition,
//! 3. [`compute_shapley`](shapley::compute_shapley), which turns the complete
//!    coalition table into Shapley values.
//!
//! Monte Carlo estimators live in [`mc`], regression estimators (separate and
//! surrogate) in [`regression`], and out-of-process regressors are reached
//! through [`bridge`]. [`oracle`], [`metrics`] and [`sim`] provide the ground
//! truth and evaluation harness for Gaussian simulations.

pub mod bridge;
pub mod coalition;
pub mod data;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod explain;
pub mod mc;
pub mod methods;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod regression;
pub mod rng;
pub mod shapley;
pub mod sim;

pub use coalition::{enumerate_coalitions, Coalition, MAX_FEATURES};
pub use data::Dataset;
pub use error::{Error, Result};
pub use estimator::{ContributionEstimator, PreparedEstimator, Query};
pub use model::{PredictiveModel, SharedModel};
pub use shapley::{compute_shapley, CoalitionTable, Explanation};
