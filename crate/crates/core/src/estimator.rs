//! The contribution-function estimator interface.

use rayon::prelude::*;

use crate::coalition::Coalition;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::SharedModel;

/// One instance `x*` to explain. `index` identifies it for seeding.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub index: usize,
    pub instance: Vec<f64>,
}

impl Query {
    pub fn new(index: usize, instance: Vec<f64>) -> Self {
        Query { index, instance }
    }

    /// One query per row of `data`, indexed by row number.
    pub fn from_dataset(data: &Dataset) -> Vec<Query> {
        (0..data.n_rows())
            .map(|i| Query::new(i, data.row(i)))
            .collect()
    }
}

/// A strategy for estimating `v(S, x*)`.
///
/// `prepare` does everything that depends only on the training data and the
/// model (fitting Gaussians, training regressors). The returned state is
/// read-only and may be shared across workers.
pub trait ContributionEstimator: Send + Sync {
    fn label(&self) -> String;

    fn prepare(&self, train: &Dataset, model: &SharedModel) -> Result<Box<dyn PreparedEstimator>>;
}

/// Prepared estimator state. The engine never asks for `∅` or the grand
/// coalition.
pub trait PreparedEstimator: Send + Sync {
    fn contribute(&self, query: &Query, coalition: Coalition) -> Result<f64>;

    /// `out[i][c]` is `v(coalitions[c], queries[i])`.
    fn contribute_batch(
        &self,
        queries: &[Query],
        coalitions: &[Coalition],
    ) -> Result<Vec<Vec<f64>>> {
        queries
            .par_iter()
            .map(|q| {
                coalitions
                    .iter()
                    .map(|&c| self.contribute(q, c).map_err(|e| e.at(q.index, c)))
                    .collect()
            })
            .collect()
    }
}

pub(crate) fn check_query(query: &Query, m: usize) -> Result<()> {
    if query.instance.len() != m {
        return Err(Error::Dimension(format!(
            "instance {} has {} features, expected {m}",
            query.index,
            query.instance.len()
        )));
    }
    Ok(())
}

pub(crate) fn check_nontrivial(coalition: Coalition, m: usize) -> Result<()> {
    if !coalition.is_nontrivial(m) {
        return Err(Error::InvalidInput(format!(
            "coalition {coalition} is trivial for M = {m}; the engine evaluates it directly"
        )));
    }
    Ok(())
}

/// Predicts the training-set mean of `f` for every coalition. Useful as a
/// floor when comparing estimators.
#[derive(Clone, Debug, Default)]
pub struct MeanEstimator;

struct PreparedMean(f64);

impl ContributionEstimator for MeanEstimator {
    fn label(&self) -> String {
        "mean".into()
    }

    fn prepare(&self, train: &Dataset, model: &SharedModel) -> Result<Box<dyn PreparedEstimator>> {
        let preds = model.predict(train.rows())?;
        Ok(Box::new(PreparedMean(
            preds.iter().sum::<f64>() / preds.len() as f64,
        )))
    }
}

impl PreparedEstimator for PreparedMean {
    fn contribute(&self, _query: &Query, _coalition: Coalition) -> Result<f64> {
        Ok(self.0)
    }
}
