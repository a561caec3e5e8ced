//! Regression-based contribution estimators.
//!
//! `v(S)` minimizes the squared loss `E[(f(x) - c)^2 | x_S = x*_S]`, so any
//! regressor trained to predict `f(x)` from `x_S` estimates it. [`separate`]
//! fits one regressor per coalition; [`surrogate`] fits a single model (or one
//! per coalition size) on masked inputs.

mod knn;
mod ols;
mod ridge;
pub mod separate;
pub mod surrogate;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

pub use knn::KnnRegressor;
pub use ols::OlsRegressor;
pub use ridge::{basis_expand, RidgeBasisRegressor};
pub use separate::{fit_separate, separate_contribution, SeparateEstimator, SeparateModelSet};
pub use surrogate::{
    build_augmented_dataset, encode_query, fit_surrogate, surrogate_contribution, AugmentationMode,
    AugmentationPlan, AugmentedRow, MaskEncoding, SurrogateEstimator, SurrogateModel,
    SurrogateVariant,
};

use crate::bridge::{BridgePool, BridgeRegressor};
use crate::error::Result;

/// A regressor fitted under squared loss.
pub trait Regressor: Send + Sync {
    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>>;
}

/// Which regressor to fit, with its hyperparameters.
#[derive(Clone)]
pub enum RegressorSpec {
    Ols,
    RidgeBasis {
        lambda: f64,
        degree: usize,
    },
    Knn {
        k: usize,
    },
    Bridge {
        backend: String,
        ensemble_size: u32,
        pool: Arc<BridgePool>,
    },
}

impl fmt::Debug for RegressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl RegressorSpec {
    pub fn ridge_basis() -> Self {
        RegressorSpec::RidgeBasis {
            lambda: ridge::DEFAULT_LAMBDA,
            degree: 2,
        }
    }

    pub fn name(&self) -> String {
        match self {
            RegressorSpec::Ols => "ols".into(),
            RegressorSpec::RidgeBasis { lambda, degree } => {
                format!("ridge-basis:degree={degree}:lambda={lambda}")
            }
            RegressorSpec::Knn { k } => format!("knn:k={k}"),
            RegressorSpec::Bridge {
                backend,
                ensemble_size,
                ..
            } => format!("bridge:{backend}:ens={ensemble_size}"),
        }
    }

    pub fn is_bridge(&self) -> bool {
        matches!(self, RegressorSpec::Bridge { .. })
    }

    /// Trains on `(x, y)`.
    pub fn fit(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<Box<dyn Regressor>> {
        Ok(match self {
            RegressorSpec::Ols => Box::new(OlsRegressor::fit(x, y)?),
            RegressorSpec::RidgeBasis { lambda, degree } => {
                Box::new(RidgeBasisRegressor::fit(x, y, *lambda, *degree)?)
            }
            RegressorSpec::Knn { k } => Box::new(KnnRegressor::fit(x, y, *k)?),
            RegressorSpec::Bridge {
                backend,
                ensemble_size,
                pool,
            } => Box::new(BridgeRegressor::fit(
                pool.clone(),
                backend,
                *ensemble_size,
                x,
                y,
            )?),
        })
    }
}

/// Columns `cols` of `x`, in the given order.
pub(crate) fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

pub(crate) fn check_xy(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    use crate::error::Error;
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "{} training rows but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Regression("no training rows".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Regression(
            "in-core regressors need finite inputs; use a bridge backend for missing values".into(),
        ));
    }
    Ok(())
}

pub(crate) fn check_width(x: &DMatrix<f64>, expected: usize) -> Result<()> {
    if x.ncols() != expected {
        return Err(crate::error::Error::Dimension(format!(
            "regressor was fit on {expected} columns, got {}",
            x.ncols()
        )));
    }
    Ok(())
}
