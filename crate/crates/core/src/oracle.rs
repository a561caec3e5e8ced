//! Ground-truth Shapley values when the features are exactly Gaussian.
//!
//! Every `v(S)` is a Monte Carlo average over the exact conditional
//! `x_S̄ | x_S`. The same standard-normal draws are reused for all coalitions
//! of a given size and for all instances (common random numbers), optionally
//! in antithetic pairs. Standard errors come from batch means; when any
//! coalition misses `target_se`, the sample count doubles, up to
//! `max_doublings` times.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coalition::{coalitions_of_size, Coalition};
use crate::error::{Error, Result};
use crate::estimator::Query;
use crate::mc::{cholesky_with_jitter, sample_standard_normals, Conditioner, GaussianModel};
use crate::model::PredictiveModel;
use crate::rng::substream;
use crate::shapley::{compute_shapley, shapley_from_dense, CoalitionTable, Explanation};

pub const MIN_ORACLE_SAMPLES: usize = 10_000;
const CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub samples: usize,
    pub seed: u64,
    pub target_se: f64,
    pub max_doublings: u32,
    pub antithetic: bool,
    pub batches: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            samples: 1_000_000,
            seed: 0,
            target_se: 1e-3,
            max_doublings: 4,
            antithetic: true,
            batches: 100,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < MIN_ORACLE_SAMPLES {
            return Err(Error::Config(format!(
                "oracle needs at least {MIN_ORACLE_SAMPLES} samples, got {}",
                self.samples
            )));
        }
        if self.batches < 2 || self.samples < 2 * self.batches {
            return Err(Error::Config(format!(
                "oracle batches must be >= 2 and at most samples / 2, got {}",
                self.batches
            )));
        }
        if self.antithetic && !self.samples.is_multiple_of(2 * self.batches) {
            return Err(Error::Config(format!(
                "with antithetic pairs, samples ({}) must be a multiple of 2 x batches ({})",
                self.samples,
                2 * self.batches
            )));
        }
        if self.target_se.is_nan() || self.target_se <= 0.0 {
            return Err(Error::Config(format!(
                "target_se must be > 0, got {}",
                self.target_se
            )));
        }
        Ok(())
    }
}

/// Oracle output for one instance.
#[derive(Clone, Debug)]
pub struct OracleResult {
    pub explanation: Explanation,
    /// Estimated `v(S)`, with `v(M) = f(x*)` exact.
    pub table: CoalitionTable,
    /// Standard error of `v(S)` by mask; zero for the grand coalition.
    pub v_se: Vec<f64>,
    /// Standard error of each `φ_j`.
    pub phi_se: Vec<f64>,
    pub samples: usize,
    pub reached_target: bool,
}

impl OracleResult {
    /// Largest standard error over coalitions other than the grand one.
    pub fn max_v_se(&self) -> f64 {
        let full = self.v_se.len() - 1;
        self.v_se[..full].iter().copied().fold(0.0, f64::max)
    }
}

enum Sampler {
    Marginal { lower: DMatrix<f64>, mean: Vec<f64> },
    Conditional(Conditioner),
}

struct InstanceState {
    /// `sums[mask][batch]`.
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
    done: bool,
}

/// Draws for one chunk: `(rows, batch of each row)`.
#[allow(clippy::too_many_arguments)]
fn chunk_draws(
    cfg: &OracleConfig,
    size: usize,
    round: u32,
    chunk: usize,
    start: usize,
    len: usize,
    n_round: usize,
    d: usize,
) -> (DMatrix<f64>, Vec<usize>) {
    let mut rng = substream(cfg.seed, &[size as u64, round as u64, chunk as u64]);
    let b = cfg.batches;
    if cfg.antithetic {
        let half = sample_standard_normals(len / 2, d, &mut rng);
        let z = DMatrix::from_fn(len, d, |i, j| {
            if i % 2 == 0 {
                half[(i / 2, j)]
            } else {
                -half[(i / 2, j)]
            }
        });
        let batch = (0..len)
            .map(|i| ((start + i) / 2) * b / (n_round / 2))
            .collect();
        (z, batch)
    } else {
        let z = sample_standard_normals(len, d, &mut rng);
        let batch = (0..len).map(|i| (start + i) * b / n_round).collect();
        (z, batch)
    }
}

fn eval_chunk(
    model: &dyn PredictiveModel,
    sampler: &Sampler,
    instance: &[f64],
    z: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let m = instance.len();
    let n = z.nrows();
    let mut x = DMatrix::from_fn(n, m, |_, j| instance[j]);
    match sampler {
        Sampler::Marginal { lower, mean } => {
            let draws = z * lower.transpose();
            for i in 0..n {
                for j in 0..m {
                    x[(i, j)] = mean[j] + draws[(i, j)];
                }
            }
        }
        Sampler::Conditional(c) => {
            let mu = c.mean_for(instance);
            let draws = z * c.lower().transpose();
            for i in 0..n {
                for (k, &j) in c.free().iter().enumerate() {
                    x[(i, j)] = mu[k] + draws[(i, k)];
                }
            }
        }
    }
    model.predict(&x)
}

fn batch_se(values: &[f64]) -> f64 {
    let b = values.len() as f64;
    let mean = values.iter().sum::<f64>() / b;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0)).sqrt() / b.sqrt()
}

/// Ground-truth explanations for every query under `distribution`.
pub fn true_shapley_gaussian(
    model: &dyn PredictiveModel,
    queries: &[Query],
    distribution: &GaussianModel,
    config: &OracleConfig,
) -> Result<Vec<OracleResult>> {
    config.validate()?;
    let m = model.n_features();
    if distribution.n_features() != m {
        return Err(Error::Dimension(format!(
            "model has {m} features, distribution has {}",
            distribution.n_features()
        )));
    }
    for q in queries {
        crate::estimator::check_query(q, m)?;
    }
    let full = Coalition::full(m).mask() as usize;
    let (chol, _) = cholesky_with_jitter(distribution.cov())
        .ok_or_else(|| Error::Numerical("oracle covariance is not positive definite".into()))?;
    let mut samplers: Vec<Option<Sampler>> = (0..=full).map(|_| None).collect();
    samplers[0] = Some(Sampler::Marginal {
        lower: chol.l(),
        mean: distribution.mean().iter().copied().collect(),
    });
    for mask in 1..full {
        samplers[mask] = Some(Sampler::Conditional(
            distribution.conditioner(Coalition::from_mask(mask as u32))?,
        ));
    }
    let by_size: Vec<Vec<Coalition>> = (0..m)
        .map(|s| {
            if s == 0 {
                Ok(vec![Coalition::EMPTY])
            } else {
                coalitions_of_size(m, s)
            }
        })
        .collect::<Result<_>>()?;

    let b = config.batches;
    let mut states: Vec<InstanceState> = queries
        .iter()
        .map(|_| InstanceState {
            sums: vec![vec![0.0; b]; full],
            counts: vec![0; b],
            done: false,
        })
        .collect();
    let mut total = 0usize;
    for round in 0..=config.max_doublings {
        let n_round = if round == 0 { config.samples } else { total };
        for (size, coalitions) in by_size.iter().enumerate() {
            let d = m - size;
            let mut start = 0;
            let mut chunk = 0;
            while start < n_round {
                let mut len = CHUNK.min(n_round - start);
                if config.antithetic {
                    len -= len % 2;
                }
                let (z, batch) = chunk_draws(config, size, round, chunk, start, len, n_round, d);
                states
                    .par_iter_mut()
                    .zip(queries.par_iter())
                    .filter(|(s, _)| !s.done)
                    .try_for_each(|(state, q)| -> Result<()> {
                        for &c in coalitions {
                            let sampler =
                                samplers[c.mask() as usize].as_ref().expect("sampler built");
                            let f = eval_chunk(model, sampler, &q.instance, &z)
                                .map_err(|e| e.at(q.index, c))?;
                            let sums = &mut state.sums[c.mask() as usize];
                            for (v, &k) in f.iter().zip(&batch) {
                                sums[k] += v;
                            }
                        }
                        if size == 0 {
                            for &k in &batch {
                                state.counts[k] += 1;
                            }
                        }
                        Ok(())
                    })?;
                start += len;
                chunk += 1;
            }
        }
        total += n_round;
        let mut all_done = true;
        for state in states.iter_mut().filter(|s| !s.done) {
            let worst = (0..full)
                .map(|mask| {
                    let means: Vec<f64> = (0..b)
                        .map(|k| state.sums[mask][k] / state.counts[k] as f64)
                        .collect();
                    batch_se(&means)
                })
                .fold(0.0, f64::max);
            if worst <= config.target_se {
                state.done = true;
            } else {
                all_done = false;
            }
        }
        if all_done {
            break;
        }
    }

    let flat: Vec<f64> = queries
        .iter()
        .flat_map(|q| q.instance.iter().copied())
        .collect();
    let fx = if queries.is_empty() {
        Vec::new()
    } else {
        model.predict(&DMatrix::from_row_slice(queries.len(), m, &flat))?
    };

    states
        .into_iter()
        .zip(fx)
        .map(|(state, fxi)| {
            let count: usize = state.counts.iter().sum();
            let mut values: Vec<f64> = state
                .sums
                .iter()
                .map(|s| s.iter().sum::<f64>() / count as f64)
                .collect();
            values.push(fxi);
            let table = CoalitionTable::from_values(m, values)?;
            let explanation = compute_shapley(&table)?;
            let mut v_se: Vec<f64> = (0..full)
                .map(|mask| {
                    let means: Vec<f64> = (0..b)
                        .map(|k| state.sums[mask][k] / state.counts[k] as f64)
                        .collect();
                    batch_se(&means)
                })
                .collect();
            v_se.push(0.0);
            let per_batch: Vec<Vec<f64>> = (0..b)
                .map(|k| {
                    let mut v: Vec<f64> = (0..full)
                        .map(|mask| state.sums[mask][k] / state.counts[k] as f64)
                        .collect();
                    v.push(fxi);
                    shapley_from_dense(m, &v)
                })
                .collect();
            let phi_se = (0..m)
                .map(|j| batch_se(&per_batch.iter().map(|p| p[j]).collect::<Vec<_>>()))
                .collect();
            let reached_target = v_se.iter().all(|&s| s <= config.target_se);
            Ok(OracleResult {
                explanation,
                table,
                v_se,
                phi_se,
                samples: count,
                reached_target,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use nalgebra::DVector;

    use super::*;
    use crate::model::{FnModel, LinearModel};
    use crate::sim::toeplitz_cov;

    fn cfg() -> OracleConfig {
        OracleConfig {
            samples: 20_000,
            max_doublings: 0,
            ..OracleConfig::default()
        }
    }

    #[test]
    fn constant_model_gives_zero_phi() {
        let dist = GaussianModel::new(DVector::zeros(3), toeplitz_cov(3, 0.5)).unwrap();
        let f = FnModel::new(3, "const", |_: &[f64]| 2.5);
        let out = true_shapley_gaussian(&f, &[Query::new(0, vec![1.0, -1.0, 0.3])], &dist, &cfg())
            .unwrap();
        assert!(out[0].explanation.phis.iter().all(|&p| p.abs() < 1e-12));
        assert!((out[0].explanation.phi0 - 2.5).abs() < 1e-12);
    }

    #[test]
    fn antithetic_pairs_make_linear_models_exact() {
        let dist = GaussianModel::new(DVector::zeros(3), toeplitz_cov(3, 0.0)).unwrap();
        let f = LinearModel::new(0.5, vec![1.0, -2.0, 3.0]).unwrap();
        let x = vec![0.2, 0.4, -1.0];
        let out = true_shapley_gaussian(&f, &[Query::new(0, x.clone())], &dist, &cfg()).unwrap();
        for (j, p) in out[0].explanation.phis.iter().enumerate() {
            assert!((p - f.coefs[j] * x[j]).abs() < 1e-10);
        }
        assert!(out[0].reached_target);
    }

    #[test]
    fn additive_under_independence() {
        let dist = GaussianModel::new(DVector::zeros(3), toeplitz_cov(3, 0.0)).unwrap();
        let f = FnModel::new(3, "additive", |x: &[f64]| {
            x[0].cos() + x[1] * x[1] + x[2].sin()
        });
        let x = vec![0.5, -1.2, 0.8];
        let c = OracleConfig {
            antithetic: false,
            ..cfg()
        };
        let out = &true_shapley_gaussian(&f, &[Query::new(0, x.clone())], &dist, &c).unwrap()[0];
        // E[cos Z] = e^{-1/2}, E[Z²] = 1, E[sin Z] = 0.
        let expect = [x[0].cos() - (-0.5f64).exp(), x[1] * x[1] - 1.0, x[2].sin()];
        for j in 0..3 {
            assert!(
                (out.explanation.phis[j] - expect[j]).abs() < 5.0 * out.phi_se[j] + 1e-9,
                "phi_{j} = {} vs {} (se {})",
                out.explanation.phis[j],
                expect[j],
                out.phi_se[j]
            );
        }
    }

    #[test]
    fn doubling_increases_samples_until_target() {
        let dist = GaussianModel::new(DVector::zeros(2), toeplitz_cov(2, 0.3)).unwrap();
        let f = FnModel::new(2, "sq", |x: &[f64]| x[0] * x[0] + x[1]);
        let c = OracleConfig {
            samples: 10_000,
            target_se: 1e-9,
            max_doublings: 2,
            antithetic: false,
            ..OracleConfig::default()
        };
        let out =
            &true_shapley_gaussian(&f, &[Query::new(0, vec![0.0, 0.0])], &dist, &c).unwrap()[0];
        assert_eq!(out.samples, 40_000);
        assert!(!out.reached_target);
    }

    #[test]
    fn rejects_small_sample_counts() {
        let dist = GaussianModel::new(DVector::zeros(2), toeplitz_cov(2, 0.3)).unwrap();
        let f: Arc<dyn PredictiveModel> = Arc::new(LinearModel::new(0.0, vec![1.0, 1.0]).unwrap());
        let c = OracleConfig {
            samples: 100,
            ..OracleConfig::default()
        };
        assert!(true_shapley_gaussian(f.as_ref(), &[], &dist, &c).is_err());
    }
}
