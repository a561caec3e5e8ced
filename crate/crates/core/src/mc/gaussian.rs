use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::coalition::Coalition;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Diagonal jitter tried in order until a Cholesky factorization succeeds.
pub const JITTER_LADDER: [f64; 8] = [0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky of `a + jitter·I` for the smallest jitter on the ladder that
/// works. Pivots below `1e-13` times the largest diagonal entry count as
/// failures, so exactly singular inputs always pick up a jitter.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-13 * scale;
    JITTER_LADDER.iter().find_map(|&jitter| {
        let mut shifted = a.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        let chol = Cholesky::new(shifted)?;
        let l = chol.l_dirty();
        (0..l.nrows())
            .all(|i| l[(i, i)] * l[(i, i)] > floor)
            .then_some((chol, jitter))
    })
}

/// Multivariate normal `N(μ, Σ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianModel {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    jitter: f64,
}

impl GaussianModel {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if m == 0 || cov.nrows() != m || cov.ncols() != m {
            return Err(Error::Dimension(format!(
                "mean of length {m} with covariance {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let scale = cov.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for i in 0..m {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidInput(format!(
                        "covariance is not symmetric at ({}, {})",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        let (_, jitter) = cholesky_with_jitter(&cov).ok_or_else(|| {
            Error::Numerical(format!(
                "covariance is not positive definite even with jitter {:e}",
                JITTER_LADDER[JITTER_LADDER.len() - 1]
            ))
        })?;
        Ok(GaussianModel { mean, cov, jitter })
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Precomputes everything about `p(x_S̄ | x_S)` that does not depend on `x*_S`.
    pub fn conditioner(&self, coalition: Coalition) -> Result<Conditioner> {
        let m = self.n_features();
        let given: Vec<usize> = coalition.members().filter(|&j| j < m).collect();
        let free: Vec<usize> = coalition.non_members(m).collect();
        if given.is_empty() || free.is_empty() || coalition.mask() >> m != 0 {
            return Err(Error::InvalidInput(format!(
                "conditioning needs a nontrivial coalition, got {coalition}"
            )));
        }
        let sub = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.cov[(rows[i], cols[j])])
        };
        let mut s_ss = sub(&given, &given);
        for i in 0..given.len() {
            s_ss[(i, i)] += self.jitter;
        }
        let s_sf = sub(&given, &free);
        let s_ff = sub(&free, &free);
        let (chol_ss, _) = cholesky_with_jitter(&s_ss).ok_or_else(|| {
            Error::Numerical(format!(
                "Σ_SS is numerically singular for coalition {coalition}"
            ))
        })?;
        // coef = Σ_S̄S Σ_SS⁻¹, via a solve against Σ_SS.
        let coef = chol_ss.solve(&s_sf).transpose();
        let mut cov = &s_ff - &coef * &s_sf;
        cov = (&cov + cov.transpose()) * 0.5;
        let (chol_cov, _) = cholesky_with_jitter(&cov).ok_or_else(|| {
            Error::Numerical(format!(
                "conditional covariance is not positive definite for coalition {coalition}"
            ))
        })?;
        Ok(Conditioner {
            mean_given: DVector::from_iterator(given.len(), given.iter().map(|&j| self.mean[j])),
            mean_free: DVector::from_iterator(free.len(), free.iter().map(|&j| self.mean[j])),
            given,
            free,
            coef,
            cov,
            lower: chol_cov.l(),
        })
    }
}

/// The conditional `x_S̄ | x_S` of a [`GaussianModel`] for one coalition.
#[derive(Clone, Debug)]
pub struct Conditioner {
    given: Vec<usize>,
    free: Vec<usize>,
    mean_given: DVector<f64>,
    mean_free: DVector<f64>,
    coef: DMatrix<f64>,
    cov: DMatrix<f64>,
    lower: DMatrix<f64>,
}

impl Conditioner {
    /// 0-based indices of the conditioning features.
    pub fn given(&self) -> &[usize] {
        &self.given
    }

    /// 0-based indices of the features being sampled.
    pub fn free(&self) -> &[usize] {
        &self.free
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor of the conditional covariance.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `μ_S̄ + Σ_S̄S Σ_SS⁻¹ (x*_S − μ_S)` for `x_given` ordered like [`Self::given`].
    pub fn mean(&self, x_given: &[f64]) -> DVector<f64> {
        let centered = DVector::from_column_slice(x_given) - &self.mean_given;
        &self.mean_free + &self.coef * centered
    }

    /// Mean from a full-length instance.
    pub fn mean_for(&self, instance: &[f64]) -> DVector<f64> {
        let x: Vec<f64> = self.given.iter().map(|&j| instance[j]).collect();
        self.mean(&x)
    }

    /// `k` draws as a `k × |S̄|` matrix.
    pub fn sample<R: Rng>(&self, instance: &[f64], k: usize, rng: &mut R) -> DMatrix<f64> {
        let mean = self.mean_for(instance);
        let z = sample_standard_normals(k, self.free.len(), rng);
        let mut out = z * self.lower.transpose();
        for mut row in out.row_iter_mut() {
            row += mean.transpose();
        }
        out
    }
}

/// `k × d` matrix of independent standard normals, filled row by row.
pub fn sample_standard_normals<R: Rng>(k: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    let values: Vec<f64> = (0..k * d).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(k, d, &values)
}

/// Column means and the `N − 1` sample covariance of a dataset.
pub fn fit_gaussian(dataset: &Dataset) -> Result<GaussianModel> {
    let x = dataset.rows();
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "fitting a Gaussian needs at least 2 rows, got {n}"
        )));
    }
    let mean = DVector::from_vec(dataset.column_means());
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianModel::new(mean, cov)
}

/// Conditional mean and covariance of `x_S̄` given `x_S = x_given`.
pub fn conditional_gaussian(
    model: &GaussianModel,
    coalition: Coalition,
    x_given: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cond = model.conditioner(coalition)?;
    if x_given.len() != cond.given.len() {
        return Err(Error::Dimension(format!(
            "coalition {coalition} has {} members, got {} values",
            cond.given.len(),
            x_given.len()
        )));
    }
    Ok((cond.mean(x_given), cond.cov.clone()))
}
