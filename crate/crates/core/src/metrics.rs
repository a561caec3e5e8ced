//! Evaluation metrics: per-instance MAE of Shapley values and `MSE_v`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coalition::Coalition;
use crate::error::{Error, Result};
use crate::shapley::{CoalitionTable, Explanation};

/// `MAE[i] = (1/M) Σ_j |φ_true,j − φ̂_j|` per instance, and their mean.
pub fn mae(truth: &[Explanation], estimate: &[Explanation]) -> Result<(Vec<f64>, f64)> {
    if truth.len() != estimate.len() {
        return Err(Error::Dimension(format!(
            "{} true explanations but {} estimates",
            truth.len(),
            estimate.len()
        )));
    }
    let per = truth
        .iter()
        .zip(estimate)
        .enumerate()
        .map(|(i, (t, e))| {
            if t.phis.len() != e.phis.len() {
                return Err(Error::Dimension(format!(
                    "instance {i}: {} true values but {} estimated",
                    t.phis.len(),
                    e.phis.len()
                )));
            }
            let m = t.phis.len().max(1) as f64;
            Ok(t.phis
                .iter()
                .zip(&e.phis)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / m)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = mean(&per);
    Ok((per, mean))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `MSE_v` and its per-coalition terms: for each nontrivial `S`, the mean
/// over instances of `(f(x) − v̂(S, x))²`; `MSE_v` averages those.
pub fn mse_v_by_coalition(
    f_values: &[f64],
    tables: &[CoalitionTable],
) -> Result<(f64, BTreeMap<Coalition, f64>)> {
    if f_values.len() != tables.len() {
        return Err(Error::Dimension(format!(
            "{} predictions but {} coalition tables",
            f_values.len(),
            tables.len()
        )));
    }
    let Some(first) = tables.first() else {
        return Err(Error::InvalidInput("no instances to score".into()));
    };
    let m = first.n_features();
    let mut sums: BTreeMap<Coalition, f64> = BTreeMap::new();
    for (i, (fx, table)) in f_values.iter().zip(tables).enumerate() {
        if table.n_features() != m {
            return Err(Error::Dimension(format!(
                "instance {i} has a table for M = {}",
                table.n_features()
            )));
        }
        for c in crate::coalition::nontrivial_coalitions(m)? {
            let v = table.get(c).ok_or(Error::IncompleteTable {
                missing: table.missing().len(),
                first: c,
            })?;
            *sums.entry(c).or_insert(0.0) += (fx - v).powi(2);
        }
    }
    let n = tables.len() as f64;
    for v in sums.values_mut() {
        *v /= n;
    }
    let total = sums.values().sum::<f64>() / sums.len() as f64;
    Ok((total, sums))
}

pub fn mse_v(f_values: &[f64], tables: &[CoalitionTable]) -> Result<f64> {
    Ok(mse_v_by_coalition(f_values, tables)?.0)
}

/// Evaluation summary for one estimator on one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub estimator: String,
    pub per_instance_mae: Vec<f64>,
    pub mean_mae: f64,
    pub mse_v: f64,
    /// Keyed by coalition in `{1,3}` notation.
    pub per_coalition_mse: BTreeMap<String, f64>,
    pub runtime_seconds: f64,
}

impl MetricReport {
    pub fn new(
        estimator: impl Into<String>,
        truth: &[Explanation],
        estimate: &[Explanation],
        f_values: &[f64],
        tables: &[CoalitionTable],
        runtime_seconds: f64,
    ) -> Result<Self> {
        let (per_instance_mae, mean_mae) = mae(truth, estimate)?;
        let (mse_v, per) = mse_v_by_coalition(f_values, tables)?;
        Ok(MetricReport {
            estimator: estimator.into(),
            per_instance_mae,
            mean_mae,
            mse_v,
            per_coalition_mse: per.into_iter().map(|(c, v)| (c.to_string(), v)).collect(),
            runtime_seconds,
        })
    }
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Dimension(format!(
            "spearman needs two equal-length samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(f64::NAN);
    }
    Ok(cov / (va * vb).sqrt())
}
