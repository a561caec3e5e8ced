//! Gaussian simulation data and the `gam_more_interactions` response.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mc::GaussianModel;
use crate::model::{check_batch, PredictiveModel};
use crate::rng::substream;

pub const GAM_BETA: [f64; 9] = [1.0, 0.2, -0.8, 1.0, 0.5, -0.8, 0.6, -0.7, -0.6];
pub const GAM_GAMMA: [f64; 4] = [0.8, -1.0, -2.0, 1.5];

const DATA_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub m: usize,
    pub rho: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            m: 8,
            rho: 0.0,
            n_train: 1000,
            n_test: 250,
            noise_sd: 1.0,
            beta: GAM_BETA.to_vec(),
            gamma: GAM_GAMMA.to_vec(),
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "rho must be in [0, 1), got {}",
                self.rho
            )));
        }
        if self.m == 0 || self.n_train < 2 || self.n_test == 0 {
            return Err(Error::Config(
                "need M >= 1, N_train >= 2 and N_test >= 1".into(),
            ));
        }
        if self.noise_sd.is_nan() || self.noise_sd < 0.0 {
            return Err(Error::Config(format!(
                "noise_sd must be >= 0, got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }
}

/// `Σ_ij = ρ^|i−j|`.
pub fn toeplitz_cov(m: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            1.0
        } else {
            rho.powi(i.abs_diff(j) as i32)
        }
    })
}

/// Simulated train/test split and the exact feature distribution.
#[derive(Clone, Debug)]
pub struct SimData {
    pub train: Dataset,
    pub test: Dataset,
    pub distribution: GaussianModel,
}

/// Draws `N_train + N_test` rows from `N(0, Σ)` with `Σ_ij = ρ^|i−j|`.
pub fn gen_mvn_data(config: &SimConfig) -> Result<SimData> {
    config.validate()?;
    let m = config.m;
    let cov = toeplitz_cov(m, config.rho);
    let distribution = GaussianModel::new(DVector::zeros(m), cov.clone())?;
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("Toeplitz covariance is not positive definite".into()))?;
    let l = chol.l();
    let n = config.n_train + config.n_test;
    let mut rng = substream(config.seed, &[DATA_STREAM]);
    let z = DMatrix::<f64>::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng));
    let x = (l * z).transpose();
    let all = Dataset::from_matrix(x)?;
    Ok(SimData {
        train: all.slice_rows(0, config.n_train)?,
        test: all.slice_rows(config.n_train, config.n_test)?,
        distribution,
    })
}

/// `g(a, b) = ab + ab² + ba²`.
pub fn g(a: f64, b: f64) -> f64 {
    a * b + a * b * b + b * a * a
}

/// `β0 + Σ β_j cos(x_j) + γ1 g(x1, x2) + γ2 g(x3, x4)`.
pub fn gam_more_interactions(x: &[f64], beta: &[f64], gamma: &[f64]) -> Result<f64> {
    if x.len() < 4 || beta.len() != x.len() + 1 || gamma.len() < 2 {
        return Err(Error::Dimension(format!(
            "gam_more needs |x| >= 4, |beta| = |x| + 1 and |gamma| >= 2; got {}, {}, {}",
            x.len(),
            beta.len(),
            gamma.len()
        )));
    }
    let additive: f64 = x.iter().zip(&beta[1..]).map(|(v, b)| b * v.cos()).sum();
    Ok(beta[0] + additive + gamma[0] * g(x[0], x[1]) + gamma[1] * g(x[2], x[3]))
}

/// [`gam_more_interactions`] as a [`PredictiveModel`].
#[derive(Clone, Debug)]
pub struct GamMoreModel {
    beta: Vec<f64>,
    gamma: Vec<f64>,
}

impl GamMoreModel {
    pub fn new(beta: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        gam_more_interactions(&vec![0.0; beta.len().saturating_sub(1)], &beta, &gamma)?;
        Ok(GamMoreModel { beta, gamma })
    }

    pub fn from_config(config: &SimConfig) -> Result<Self> {
        if config.beta.len() != config.m + 1 {
            return Err(Error::Config(format!(
                "beta must have M + 1 = {} entries, got {}",
                config.m + 1,
                config.beta.len()
            )));
        }
        if config.gamma.len() != 4 {
            return Err(Error::Config(format!(
                "gamma must have 4 entries, got {}",
                config.gamma.len()
            )));
        }
        Self::new(config.beta.clone(), config.gamma.clone())
    }
}

impl PredictiveModel for GamMoreModel {
    fn n_features(&self) -> usize {
        self.beta.len() - 1
    }

    fn predict(&self, batch: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_batch(batch, self.n_features())?;
        (0..batch.nrows())
            .map(|i| {
                let row: Vec<f64> = batch.row(i).iter().copied().collect();
                gam_more_interactions(&row, &self.beta, &self.gamma)
            })
            .collect()
    }

    fn describe(&self) -> String {
        "gam-more".into()
    }
}

/// `y = f(x) + ε` with `ε ~ N(0, noise_sd²)` from a seeded substream.
pub fn make_response(
    dataset: &Dataset,
    f: &dyn PredictiveModel,
    noise_sd: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = substream(seed, &[NOISE_STREAM]);
    let fx = f.predict(dataset.rows())?;
    Ok(fx
        .into_iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + noise_sd * e
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_structure() {
        assert_eq!(toeplitz_cov(3, 0.0), DMatrix::identity(3, 3));
        let c = toeplitz_cov(4, 0.9);
        assert!((c[(0, 2)] - 0.81).abs() < 1e-15);
        assert_eq!(c[(3, 3)], 1.0);
    }

    #[test]
    fn gam_reference_values() {
        assert!(
            (gam_more_interactions(&[0.0; 8], &GAM_BETA, &GAM_GAMMA).unwrap() - 0.4).abs() < 1e-15
        );
        assert_eq!(g(1.0, 1.0), 3.0);
        assert_eq!(g(2.7, 0.0), 0.0);
        assert!(gam_more_interactions(&[0.0; 3], &GAM_BETA[..4], &GAM_GAMMA).is_err());
    }

    #[test]
    fn sample_correlation_matches_rho() {
        let cfg = SimConfig {
            m: 3,
            rho: 0.5,
            n_train: 100_000,
            n_test: 1,
            beta: vec![0.0; 4],
            ..SimConfig::default()
        };
        let data = gen_mvn_data(&cfg).unwrap();
        let x = data.train.rows();
        let n = x.nrows() as f64;
        let (a, b) = (x.column(0), x.column(1));
        let (ma, mb) = (a.sum() / n, b.sum() / n);
        let cov = a
            .iter()
            .zip(b.iter())
            .map(|(p, q)| (p - ma) * (q - mb))
            .sum::<f64>();
        let va = a.iter().map(|p| (p - ma).powi(2)).sum::<f64>();
        let vb = b.iter().map(|q| (q - mb).powi(2)).sum::<f64>();
        assert!((cov / (va * vb).sqrt() - 0.5).abs() < 0.01);
    }

    #[test]
    fn noise_variance_and_determinism() {
        let cfg = SimConfig {
            n_train: 100_000,
            n_test: 1,
            ..SimConfig::default()
        };
        let data = gen_mvn_data(&cfg).unwrap();
        let f = GamMoreModel::from_config(&cfg).unwrap();
        let y = make_response(&data.train, &f, 1.0, 7).unwrap();
        let fx = f.predict(data.train.rows()).unwrap();
        let resid: Vec<f64> = y.iter().zip(&fx).map(|(a, b)| a - b).collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.02, "{var}");
        assert_eq!(y, make_response(&data.train, &f, 1.0, 7).unwrap());
        assert_eq!(make_response(&data.train, &f, 0.0, 7).unwrap(), fx);
    }

    #[test]
    fn rejects_rho_one() {
        let cfg = SimConfig {
            rho: 1.0,
            ..SimConfig::default()
        };
        assert!(gen_mvn_data(&cfg).is_err());
    }
}
