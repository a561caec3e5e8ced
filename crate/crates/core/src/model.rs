//! Predictive models `f` being explained.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::regression::Regressor;

/// A deterministic model mapping a K×M batch to K predictions.
///
/// Implementations must be safe to call concurrently. Models backed by a
/// single bridge session serialize calls internally.
pub trait PredictiveModel: Send + Sync {
    fn n_features(&self) -> usize;

    fn predict(&self, batch: &DMatrix<f64>) -> Result<Vec<f64>>;

    fn describe(&self) -> String {
        "model".to_string()
    }
}

pub type SharedModel = Arc<dyn PredictiveModel>;

impl fmt::Debug for dyn PredictiveModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PredictiveModel({})", self.describe())
    }
}

pub(crate) fn check_batch(batch: &DMatrix<f64>, m: usize) -> Result<()> {
    if batch.ncols() != m {
        return Err(Error::Dimension(format!(
            "model expects {m} features, batch has {}",
            batch.ncols()
        )));
    }
    Ok(())
}

/// Predictions for a single instance.
pub fn predict_one(model: &dyn PredictiveModel, x: &[f64]) -> Result<f64> {
    let batch = DMatrix::from_row_slice(1, x.len(), x);
    Ok(model.predict(&batch)?[0])
}

/// `f(x) = intercept + coefs · x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefs: Vec<f64>,
}

impl LinearModel {
    pub fn new(intercept: f64, coefs: Vec<f64>) -> Result<Self> {
        if coefs.is_empty() {
            return Err(Error::InvalidInput(
                "linear model needs at least one coefficient".into(),
            ));
        }
        Ok(LinearModel { intercept, coefs })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefs.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

impl PredictiveModel for LinearModel {
    fn n_features(&self) -> usize {
        self.coefs.len()
    }

    fn predict(&self, batch: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_batch(batch, self.coefs.len())?;
        Ok((0..batch.nrows())
            .map(|i| {
                self.intercept
                    + self
                        .coefs
                        .iter()
                        .enumerate()
                        .map(|(j, b)| b * batch[(i, j)])
                        .sum::<f64>()
            })
            .collect())
    }

    fn describe(&self) -> String {
        format!("linear(m={})", self.coefs.len())
    }
}

/// Row-wise model defined by a closure.
pub struct FnModel<F> {
    m: usize,
    label: String,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    pub fn new(m: usize, label: impl Into<String>, f: F) -> Self {
        FnModel {
            m,
            label: label.into(),
            f,
        }
    }
}

impl<F> PredictiveModel for FnModel<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn n_features(&self) -> usize {
        self.m
    }

    fn predict(&self, batch: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_batch(batch, self.m)?;
        let mut row = vec![0.0; self.m];
        Ok((0..batch.nrows())
            .map(|i| {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = batch[(i, j)];
                }
                (self.f)(&row)
            })
            .collect())
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}

/// A regressor fitted on `(X, y)` and used as the model to explain.
pub struct FittedModel {
    m: usize,
    label: String,
    regressor: Box<dyn Regressor>,
}

impl FittedModel {
    pub fn new(m: usize, label: impl Into<String>, regressor: Box<dyn Regressor>) -> Self {
        FittedModel {
            m,
            label: label.into(),
            regressor,
        }
    }
}

impl PredictiveModel for FittedModel {
    fn n_features(&self) -> usize {
        self.m
    }

    fn predict(&self, batch: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_batch(batch, self.m)?;
        self.regressor.predict(batch)
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_predicts_and_checks_width() {
        let f = LinearModel::new(1.0, vec![2.0, -1.0]).unwrap();
        let batch = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.5, 3.0]);
        assert_eq!(f.predict(&batch).unwrap(), vec![2.0, -1.0]);
        assert!(f.predict(&DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn predictions_are_deterministic() {
        let f = FnModel::new(2, "prod", |x: &[f64]| x[0] * x[1].sin());
        let batch = DMatrix::from_fn(50, 2, |i, j| (i * 3 + j) as f64 * 0.37);
        let a = f.predict(&batch).unwrap();
        let b = f.predict(&batch).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
