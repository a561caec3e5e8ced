use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::gaussian::{fit_gaussian, Conditioner, GaussianModel};
use crate::coalition::{full_mask, Coalition};
use crate::data::{column_sds, Dataset};
use crate::error::{Error, Result};
use crate::estimator::{
    check_nontrivial, check_query, ContributionEstimator, PreparedEstimator, Query,
};
use crate::model::SharedModel;
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Independence,
    Empirical,
    Gaussian,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Independence => "independence",
            SamplerKind::Empirical => "empirical",
            SamplerKind::Gaussian => "gaussian-mc",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McConfig {
    /// Draws per coalition, `K`.
    pub samples: usize,
    pub seed: u64,
    pub empirical_neighbors: usize,
    pub empirical_bandwidth: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            samples: 1000,
            seed: 0,
            empirical_neighbors: 100,
            empirical_bandwidth: 0.1,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("Monte Carlo needs K >= 1".into()));
        }
        if self.empirical_neighbors == 0 {
            return Err(Error::Config(
                "empirical sampler needs at least one neighbor".into(),
            ));
        }
        if self.empirical_bandwidth.is_nan() || self.empirical_bandwidth < 0.0 {
            return Err(Error::Config(
                "empirical bandwidth must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// `K` training rows drawn uniformly with replacement, restricted to the
/// columns outside `coalition`.
pub fn independence_sample<R: Rng>(
    train: &DMatrix<f64>,
    coalition: Coalition,
    k: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = train.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let free: Vec<usize> = coalition.non_members(train.ncols()).collect();
    let mut out = DMatrix::zeros(k, free.len());
    for r in 0..k {
        let i = rng.random_range(0..n);
        for (c, &j) in free.iter().enumerate() {
            out[(r, c)] = train[(i, j)];
        }
    }
    Ok(out)
}

/// `K` rows resampled from the `neighbors` training rows closest to `x*_S`.
///
/// Distance is Euclidean over the coalition columns after dividing each by its
/// training standard deviation (`sds`; zero deviations count as one). Rows are
/// drawn with weights `exp(-d²/(2 h²))`, shifted so the nearest row has weight
/// one; `h = 0` keeps only the nearest rows.
#[allow(clippy::too_many_arguments)]
pub fn empirical_sample<R: Rng>(
    train: &DMatrix<f64>,
    sds: &[f64],
    coalition: Coalition,
    instance: &[f64],
    neighbors: usize,
    bandwidth: f64,
    k: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = train.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let m = train.ncols();
    let given: Vec<usize> = coalition.members().filter(|&j| j < m).collect();
    let free: Vec<usize> = coalition.non_members(m).collect();
    let mut dist: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let d2: f64 = given
                .iter()
                .map(|&j| {
                    let sd = if sds[j] > 0.0 { sds[j] } else { 1.0 };
                    ((instance[j] - train[(i, j)]) / sd).powi(2)
                })
                .sum();
            (if d2.is_nan() { f64::INFINITY } else { d2 }, i)
        })
        .collect();
    let keep = neighbors.min(n);
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if keep < n {
        dist.select_nth_unstable_by(keep - 1, order);
        dist.truncate(keep);
    }
    dist.sort_by(order);
    let d_min = dist[0].0;
    if !d_min.is_finite() {
        return Err(Error::Numerical(
            "all empirical distances are infinite".into(),
        ));
    }
    let weights: Vec<f64> = dist
        .iter()
        .map(|&(d2, _)| {
            if bandwidth > 0.0 {
                (-(d2 - d_min) / (2.0 * bandwidth * bandwidth)).exp()
            } else if d2 == d_min {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let picker = WeightedIndex::new(&weights)
        .map_err(|e| Error::Numerical(format!("empirical kernel weights: {e}")))?;
    let mut out = DMatrix::zeros(k, free.len());
    for r in 0..k {
        let i = dist[picker.sample(rng)].1;
        for (c, &j) in free.iter().enumerate() {
            out[(r, c)] = train[(i, j)];
        }
    }
    Ok(out)
}

/// Monte Carlo estimator of the contribution function.
#[derive(Clone, Debug)]
pub struct MonteCarloEstimator {
    pub kind: SamplerKind,
    pub config: McConfig,
    /// For the gaussian sampler: use this distribution instead of fitting one.
    pub gaussian: Option<GaussianModel>,
}

impl MonteCarloEstimator {
    pub fn new(kind: SamplerKind, config: McConfig) -> Self {
        MonteCarloEstimator {
            kind,
            config,
            gaussian: None,
        }
    }

    pub fn with_gaussian(mut self, model: GaussianModel) -> Self {
        self.gaussian = Some(model);
        self
    }

    /// Prepares with concrete types, for callers that need [`PreparedMonteCarlo`]
    /// (e.g. to read standard errors).
    pub fn prepare_mc(&self, train: &Dataset, model: &SharedModel) -> Result<PreparedMonteCarlo> {
        self.config.validate()?;
        let m = train.n_features();
        if model.n_features() != m {
            return Err(Error::Dimension(format!(
                "model expects {} features, training data has {m}",
                model.n_features()
            )));
        }
        let gaussian = match self.kind {
            SamplerKind::Gaussian => Some(match &self.gaussian {
                Some(g) if g.n_features() == m => g.clone(),
                Some(g) => {
                    return Err(Error::Dimension(format!(
                        "given Gaussian has {} features, data has {m}",
                        g.n_features()
                    )))
                }
                None => fit_gaussian(train)?,
            }),
            _ => None,
        };
        let conditioners = match self.kind {
            SamplerKind::Gaussian => (0..=full_mask(m)).map(|_| OnceLock::new()).collect(),
            _ => Vec::new(),
        };
        Ok(PreparedMonteCarlo {
            kind: self.kind,
            config: self.config.clone(),
            train: train.rows().clone(),
            sds: column_sds(train.rows()),
            model: model.clone(),
            gaussian,
            conditioners,
        })
    }
}

impl ContributionEstimator for MonteCarloEstimator {
    fn label(&self) -> String {
        format!("{}:K={}", self.kind.name(), self.config.samples)
    }

    fn prepare(&self, train: &Dataset, model: &SharedModel) -> Result<Box<dyn PreparedEstimator>> {
        Ok(Box::new(self.prepare_mc(train, model)?))
    }
}

pub struct PreparedMonteCarlo {
    kind: SamplerKind,
    config: McConfig,
    train: DMatrix<f64>,
    sds: Vec<f64>,
    model: SharedModel,
    gaussian: Option<GaussianModel>,
    conditioners: Vec<OnceLock<std::result::Result<Arc<Conditioner>, String>>>,
}

impl PreparedMonteCarlo {
    pub fn gaussian(&self) -> Option<&GaussianModel> {
        self.gaussian.as_ref()
    }

    fn conditioner(&self, coalition: Coalition) -> Result<Arc<Conditioner>> {
        let g = self
            .gaussian
            .as_ref()
            .ok_or_else(|| Error::Estimator("gaussian sampler not prepared".into()))?;
        self.conditioners[coalition.mask() as usize]
            .get_or_init(|| {
                g.conditioner(coalition)
                    .map(Arc::new)
                    .map_err(|e| e.to_string())
            })
            .clone()
            .map_err(Error::Numerical)
    }

    /// Conditional draws of the features outside `coalition`.
    pub fn sample<R: Rng>(
        &self,
        query: &Query,
        coalition: Coalition,
        k: usize,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        match self.kind {
            SamplerKind::Independence => independence_sample(&self.train, coalition, k, rng),
            SamplerKind::Empirical => empirical_sample(
                &self.train,
                &self.sds,
                coalition,
                &query.instance,
                self.config.empirical_neighbors,
                self.config.empirical_bandwidth,
                k,
                rng,
            ),
            SamplerKind::Gaussian => {
                Ok(self.conditioner(coalition)?.sample(&query.instance, k, rng))
            }
        }
    }

    /// The mean of the `K` predictions and its standard error `sd/√K`.
    pub fn contribute_with_se(&self, query: &Query, coalition: Coalition) -> Result<(f64, f64)> {
        let m = self.train.ncols();
        check_query(query, m)?;
        check_nontrivial(coalition, m)?;
        let k = self.config.samples;
        let mut rng = substream(
            self.config.seed,
            &[query.index as u64, coalition.mask() as u64],
        );
        let draws = self.sample(query, coalition, k, &mut rng)?;
        let mut batch = DMatrix::zeros(k, m);
        for j in coalition.members() {
            batch.column_mut(j).fill(query.instance[j]);
        }
        for (c, j) in coalition.non_members(m).enumerate() {
            batch.set_column(j, &draws.column(c));
        }
        let preds = self.model.predict(&batch)?;
        let mean = preds.iter().sum::<f64>() / k as f64;
        let se = if k > 1 {
            let var = preds.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        } else {
            0.0
        };
        Ok((mean, se))
    }
}

impl PreparedEstimator for PreparedMonteCarlo {
    fn contribute(&self, query: &Query, coalition: Coalition) -> Result<f64> {
        self.contribute_with_se(query, coalition).map(|(v, _)| v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FnModel, LinearModel};
    use nalgebra::DVector;
    use rand::SeedableRng;
    use std::sync::Arc;

    fn correlated_data(n: usize, rho: f64, seed: u64) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = super::super::sample_standard_normals(n, 2, &mut rng);
        let rows = DMatrix::from_fn(n, 2, |i, j| {
            if j == 0 {
                z[(i, 0)]
            } else {
                rho * z[(i, 0)] + (1.0 - rho * rho).sqrt() * z[(i, 1)]
            }
        });
        Dataset::from_matrix(rows).unwrap()
    }

    #[test]
    fn single_training_row_is_always_drawn() {
        let train = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let c = Coalition::from_features([1]);
        let ind = independence_sample(&train, c, 5, &mut rng).unwrap();
        assert!(ind.row_iter().all(|r| r[0] == 1.0 && r[1] == 3.0));
        let emp = empirical_sample(
            &train,
            &[0.0; 3],
            c,
            &[9.0, 9.0, 9.0],
            100,
            0.1,
            5,
            &mut rng,
        )
        .unwrap();
        assert!(emp.row_iter().all(|r| r[0] == 1.0 && r[1] == 3.0));
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let train = DMatrix::<f64>::zeros(0, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(independence_sample(&train, Coalition::from_mask(1), 3, &mut rng).is_err());
    }

    #[test]
    fn zero_bandwidth_concentrates_on_matching_row() {
        let train = DMatrix::from_row_slice(3, 2, &[0.0, 10.0, 1.0, 20.0, 2.0, 30.0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let sds = column_sds(&train);
        let s = empirical_sample(
            &train,
            &sds,
            Coalition::from_features([0]),
            &[1.0, 0.0],
            3,
            0.0,
            50,
            &mut rng,
        )
        .unwrap();
        assert!(s.iter().all(|&v| v == 20.0));
        let s = empirical_sample(
            &train,
            &sds,
            Coalition::from_features([0]),
            &[1.0, 0.0],
            3,
            1e-6,
            50,
            &mut rng,
        )
        .unwrap();
        assert!(s.iter().all(|&v| v == 20.0));
    }

    #[test]
    fn empirical_tracks_dependence_better_than_independence() {
        let data = correlated_data(5000, 0.9, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let sds = data.column_sds();
        let s = Coalition::from_features([0]);
        let emp =
            empirical_sample(data.rows(), &sds, s, &[1.0, 0.0], 100, 0.1, 2000, &mut rng).unwrap();
        let ind = independence_sample(data.rows(), s, 2000, &mut rng).unwrap();
        let (me, mi) = (emp.mean(), ind.mean());
        assert!((me - 0.9).abs() < (mi - 0.9).abs());
        assert!((me - 0.9).abs() < 0.15, "empirical mean {me}");
        assert!(mi.abs() < 0.1, "independence mean {mi}");
    }

    #[test]
    fn same_seed_same_output() {
        let data = correlated_data(200, 0.5, 1);
        let model: SharedModel = Arc::new(FnModel::new(2, "prod", |x: &[f64]| x[0] * x[1]));
        let cfg = McConfig {
            samples: 1,
            ..Default::default()
        };
        for kind in [
            SamplerKind::Independence,
            SamplerKind::Empirical,
            SamplerKind::Gaussian,
        ] {
            let est = MonteCarloEstimator::new(kind, cfg.clone());
            let p = est.prepare(&data, &model).unwrap();
            let q = Query::new(4, vec![0.3, -0.2]);
            let a = p.contribute(&q, Coalition::from_mask(1)).unwrap();
            let b = p.contribute(&q, Coalition::from_mask(1)).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "{kind:?}");
        }
    }

    #[test]
    fn gaussian_sampler_converges_for_linear_f() {
        let rho: f64 = 0.6;
        let cov = DMatrix::from_fn(3, 3, |i, j| rho.powi((i as i32 - j as i32).abs()));
        let g = GaussianModel::new(DVector::zeros(3), cov).unwrap();
        let f = LinearModel::new(0.5, vec![1.0, -2.0, 0.7]).unwrap();
        let data = correlated_data(10, 0.0, 0);
        let data =
            Dataset::from_matrix(DMatrix::from_fn(10, 3, |i, j| data.rows()[(i, j % 2)])).unwrap();
        let model: SharedModel = Arc::new(f.clone());
        let est = MonteCarloEstimator::new(
            SamplerKind::Gaussian,
            McConfig {
                samples: 10_000,
                seed: 5,
                ..Default::default()
            },
        )
        .with_gaussian(g.clone());
        let p = est.prepare_mc(&data, &model).unwrap();
        let x = [0.8, -1.1, 0.4];
        let q = Query::new(0, x.to_vec());
        // S = M \ {2}: the analytic value uses E[x2 | x1, x3].
        let s = Coalition::from_features([0, 2]);
        let (v, se) = p.contribute_with_se(&q, s).unwrap();
        let cond = g.conditioner(s).unwrap().mean_for(&x);
        let analytic = 0.5 + 1.0 * x[0] + 0.7 * x[2] - 2.0 * cond[0];
        assert!(
            (v - analytic).abs() < 4.0 * se,
            "v={v} analytic={analytic} se={se}"
        );
    }

    #[test]
    fn independence_is_biased_under_dependence() {
        // f = x1 x2, S = {1}: truth x1·E[x2|x1] = 0.9 x1², independence gives x1·E[x2] ≈ 0.
        let data = correlated_data(20_000, 0.9, 21);
        let model: SharedModel = Arc::new(FnModel::new(2, "prod", |x: &[f64]| x[0] * x[1]));
        let cfg = McConfig {
            samples: 4000,
            seed: 2,
            ..Default::default()
        };
        let q = Query::new(0, vec![1.5, 0.0]);
        let s = Coalition::from_features([0]);
        let ind = MonteCarloEstimator::new(SamplerKind::Independence, cfg.clone())
            .prepare_mc(&data, &model)
            .unwrap();
        let gau = MonteCarloEstimator::new(SamplerKind::Gaussian, cfg)
            .prepare_mc(&data, &model)
            .unwrap();
        let (vi, sei) = ind.contribute_with_se(&q, s).unwrap();
        let (vg, seg) = gau.contribute_with_se(&q, s).unwrap();
        assert!((vg - 0.9 * 2.25).abs() < 0.1);
        assert!((vi - vg).abs() > 4.0 * (sei * sei + seg * seg).sqrt());
    }

    #[test]
    fn rejects_trivial_coalitions_and_bad_config() {
        let data = correlated_data(20, 0.0, 0);
        let model: SharedModel = Arc::new(FnModel::new(2, "sum", |x: &[f64]| x[0] + x[1]));
        let p = MonteCarloEstimator::new(SamplerKind::Independence, McConfig::default())
            .prepare(&data, &model)
            .unwrap();
        let q = Query::new(0, vec![0.0, 0.0]);
        assert!(p.contribute(&q, Coalition::EMPTY).is_err());
        assert!(p.contribute(&q, Coalition::full(2)).is_err());
        let bad = McConfig {
            samples: 0,
            ..Default::default()
        };
        assert!(MonteCarloEstimator::new(SamplerKind::Empirical, bad)
            .prepare(&data, &model)
            .is_err());
    }
}
