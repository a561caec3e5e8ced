//! End-to-end pipeline: estimator tables, trivial coalitions and Shapley values.

use nalgebra::DMatrix;

use crate::coalition::nontrivial_coalitions;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{PreparedEstimator, Query};
use crate::model::PredictiveModel;
use crate::shapley::{compute_shapley, CoalitionTable, Explanation};

/// `φ0 = v(∅)`: the mean prediction of `f` over the training rows.
pub fn baseline_value(model: &dyn PredictiveModel, train: &Dataset) -> Result<f64> {
    let preds = model.predict(train.rows())?;
    Ok(preds.iter().sum::<f64>() / preds.len() as f64)
}

#[derive(Clone, Debug)]
pub struct ExplainOutput {
    pub tables: Vec<CoalitionTable>,
    pub explanations: Vec<Explanation>,
    /// `f(x*)` per query.
    pub predictions: Vec<f64>,
}

/// Fills a coalition table per query and computes its Shapley values.
/// `v(∅) = phi0` and `v(M) = f(x*)` never reach the estimator.
pub fn explain(
    prepared: &dyn PreparedEstimator,
    model: &dyn PredictiveModel,
    phi0: f64,
    queries: &[Query],
) -> Result<ExplainOutput> {
    let m = model.n_features();
    if let Some(q) = queries.iter().find(|q| q.instance.len() != m) {
        return Err(Error::Dimension(format!(
            "instance {} has {} features, model expects {m}",
            q.index,
            q.instance.len()
        )));
    }
    let coalitions = nontrivial_coalitions(m)?;
    let values = if queries.is_empty() {
        Vec::new()
    } else {
        prepared.contribute_batch(queries, &coalitions)?
    };

    let flat: Vec<f64> = queries
        .iter()
        .flat_map(|q| q.instance.iter().copied())
        .collect();
    let predictions = if queries.is_empty() {
        Vec::new()
    } else {
        model.predict(&DMatrix::from_row_slice(queries.len(), m, &flat))?
    };

    let mut tables = Vec::with_capacity(queries.len());
    let mut explanations = Vec::with_capacity(queries.len());
    for ((q, row), &fx) in queries.iter().zip(&values).zip(&predictions) {
        let mut table = CoalitionTable::new(m)?;
        table.set_empty(phi0);
        table.set_full(fx);
        for (&c, &v) in coalitions.iter().zip(row) {
            table.set(c, v);
        }
        let explanation = compute_shapley(&table).map_err(|e| match e {
            Error::NonFinite(c) => Error::NonFinite(c).at(q.index, c),
            e => e,
        })?;
        tables.push(table);
        explanations.push(explanation);
    }
    Ok(ExplainOutput {
        tables,
        explanations,
        predictions,
    })
}
