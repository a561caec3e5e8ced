//! Exact Shapley values from a complete coalition table.

mod axioms;

pub use axioms::{verify_axioms, AxiomReport};

use serde::{Deserialize, Serialize};

use crate::coalition::{full_mask, Coalition, MAX_FEATURES};
use crate::error::{Error, Result};

/// Attribution for one explained instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub phi0: f64,
    pub phis: Vec<f64>,
    /// `v(M) - v(∅) - Σ φ_j`.
    pub efficiency_residual: f64,
}

impl Explanation {
    /// `φ0 + Σ φ_j`, which reconstructs `f(x*)` up to the residual.
    pub fn reconstructed_prediction(&self) -> f64 {
        self.phi0 + self.phis.iter().sum::<f64>()
    }
}

/// The evaluated game `S -> v(S)` for one instance, indexed by mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CoalitionTable {
    m: usize,
    values: Vec<Option<f64>>,
}

impl CoalitionTable {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 || m > MAX_FEATURES {
            return Err(Error::InvalidInput(format!(
                "number of features must be in 1..={MAX_FEATURES}, got {m}"
            )));
        }
        Ok(CoalitionTable {
            m,
            values: vec![None; 1 << m],
        })
    }

    /// Complete table from values in ascending mask order.
    pub fn from_values(m: usize, values: Vec<f64>) -> Result<Self> {
        let mut table = CoalitionTable::new(m)?;
        if values.len() != table.values.len() {
            return Err(Error::Dimension(format!(
                "expected {} coalition values, got {}",
                table.values.len(),
                values.len()
            )));
        }
        table.values = values.into_iter().map(Some).collect();
        Ok(table)
    }

    pub fn n_features(&self) -> usize {
        self.m
    }

    pub fn set(&mut self, coalition: Coalition, value: f64) {
        self.values[coalition.mask() as usize] = Some(value);
    }

    pub fn get(&self, coalition: Coalition) -> Option<f64> {
        self.values
            .get(coalition.mask() as usize)
            .copied()
            .flatten()
    }

    pub fn set_empty(&mut self, value: f64) {
        self.values[0] = Some(value);
    }

    pub fn set_full(&mut self, value: f64) {
        self.values[full_mask(self.m) as usize] = Some(value);
    }

    pub fn v_empty(&self) -> Option<f64> {
        self.values[0]
    }

    pub fn v_full(&self) -> Option<f64> {
        self.values[full_mask(self.m) as usize]
    }

    pub fn missing(&self) -> Vec<Coalition> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(mask, _)| Coalition::from_mask(mask as u32))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    /// `(coalition, value)` pairs in ascending mask order, skipping gaps.
    pub fn entries(&self) -> impl Iterator<Item = (Coalition, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(mask, v)| v.map(|v| (Coalition::from_mask(mask as u32), v)))
    }

    fn dense(&self) -> Result<Vec<f64>> {
        let missing = self.missing();
        if let Some(&first) = missing.first() {
            return Err(Error::IncompleteTable {
                missing: missing.len(),
                first,
            });
        }
        let dense: Vec<f64> = self.values.iter().map(|v| v.unwrap_or_default()).collect();
        if let Some(mask) = dense.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(Coalition::from_mask(mask as u32)));
        }
        Ok(dense)
    }
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

/// `s! (M - s - 1)! / M!` from exact integer factorials.
pub fn shapley_weight(s: usize, m: usize) -> Result<f64> {
    if m == 0 || m > MAX_FEATURES {
        return Err(Error::InvalidInput(format!(
            "number of features must be in 1..={MAX_FEATURES}, got {m}"
        )));
    }
    if s >= m {
        return Err(Error::InvalidInput(format!(
            "coalition size {s} must be below M = {m}"
        )));
    }
    Ok((factorial(s) * factorial(m - s - 1)) as f64 / factorial(m) as f64)
}

fn weights(m: usize) -> Vec<f64> {
    (0..m)
        .map(|s| (factorial(s) * factorial(m - s - 1)) as f64 / factorial(m) as f64)
        .collect()
}

/// Shapley values of a complete game given as dense values by mask.
pub(crate) fn shapley_from_dense(m: usize, v: &[f64]) -> Vec<f64> {
    let w = weights(m);
    let full = full_mask(m);
    (0..m)
        .map(|j| {
            let bit = 1u32 << j;
            let mut acc = 0.0;
            for mask in 0..=full {
                if mask & bit == 0 {
                    let s = mask.count_ones() as usize;
                    acc += w[s] * (v[(mask | bit) as usize] - v[mask as usize]);
                }
            }
            acc
        })
        .collect()
}

/// Exact Shapley values. Fails on incomplete tables or non-finite values.
pub fn compute_shapley(table: &CoalitionTable) -> Result<Explanation> {
    let m = table.n_features();
    let v = table.dense()?;
    let phis = shapley_from_dense(m, &v);
    let v_empty = v[0];
    let v_full = v[full_mask(m) as usize];
    let efficiency_residual = v_full - v_empty - phis.iter().sum::<f64>();
    Ok(Explanation {
        phi0: v_empty,
        phis,
        efficiency_residual,
    })
}
