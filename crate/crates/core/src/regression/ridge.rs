use nalgebra::{DMatrix, DVector};

use super::{check_width, check_xy, Regressor};
use crate::error::{Error, Result};

pub(crate) const DEFAULT_LAMBDA: f64 = 1e-3;

/// Expands raw features into the ridge-basis design.
///
/// * degree 1: `x_j`, `cos(x_j)`
/// * degree 2: adds `x_j²` and `x_j x_k` for `j < k`
/// * degree 3: adds `x_j³`, `x_j² x_k` and `x_j x_k²` for `j < k`
pub fn basis_expand(x: &DMatrix<f64>, degree: usize) -> DMatrix<f64> {
    let (n, m) = (x.nrows(), x.ncols());
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for j in 0..m {
        let c = x.column(j);
        cols.push(c.into_owned());
        cols.push(c.map(f64::cos));
    }
    if degree >= 2 {
        for j in 0..m {
            cols.push(x.column(j).map(|v| v * v));
            for k in j + 1..m {
                cols.push(x.column(j).component_mul(&x.column(k)));
            }
        }
    }
    if degree >= 3 {
        for j in 0..m {
            cols.push(x.column(j).map(|v| v * v * v));
            for k in j + 1..m {
                let (a, b) = (x.column(j), x.column(k));
                cols.push(a.component_mul(&a).component_mul(&b));
                cols.push(a.component_mul(&b).component_mul(&b));
            }
        }
    }
    DMatrix::from_fn(n, cols.len(), |i, c| cols[c][i])
}

/// Ridge regression on [`basis_expand`]ed features. Basis columns are
/// standardized and the target centered, so the intercept is unpenalized and
/// `lambda → ∞` shrinks predictions to the target mean.
#[derive(Clone, Debug)]
pub struct RidgeBasisRegressor {
    degree: usize,
    m: usize,
    col_mean: Vec<f64>,
    col_scale: Vec<f64>,
    y_mean: f64,
    coefs: DVector<f64>,
}

impl RidgeBasisRegressor {
    pub fn fit(x: &DMatrix<f64>, y: &[f64], lambda: f64, degree: usize) -> Result<Self> {
        check_xy(x, y)?;
        if !(1..=3).contains(&degree) {
            return Err(Error::Regression(format!(
                "basis degree must be 1, 2 or 3, got {degree}"
            )));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Regression(format!(
                "ridge lambda must be finite and >= 0, got {lambda}"
            )));
        }
        let n = x.nrows();
        let mut z = basis_expand(x, degree);
        let p = z.ncols();
        let mut col_mean = vec![0.0; p];
        let mut col_scale = vec![1.0; p];
        for c in 0..p {
            let mean = z.column(c).sum() / n as f64;
            let sd =
                (z.column(c).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            col_mean[c] = mean;
            col_scale[c] = if sd > 1e-12 { sd } else { 0.0 };
            for i in 0..n {
                z[(i, c)] = if col_scale[c] > 0.0 {
                    (z[(i, c)] - mean) / sd
                } else {
                    0.0
                };
            }
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
        let mut gram = z.transpose() * &z;
        for c in 0..p {
            // Dropped (constant) columns get a unit ridge so the system stays definite.
            gram[(c, c)] += if col_scale[c] > 0.0 { lambda } else { 1.0 };
        }
        let rhs = z.transpose() * yc;
        let coefs = gram
            .cholesky()
            .ok_or_else(|| {
                Error::Regression("ridge normal equations are singular; increase lambda".into())
            })?
            .solve(&rhs);
        Ok(RidgeBasisRegressor {
            degree,
            m: x.ncols(),
            col_mean,
            col_scale,
            y_mean,
            coefs,
        })
    }
}

impl Regressor for RidgeBasisRegressor {
    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_width(x, self.m)?;
        let z = basis_expand(x, self.degree);
        Ok((0..z.nrows())
            .map(|i| {
                self.y_mean
                    + (0..z.ncols())
                        .filter(|&c| self.col_scale[c] > 0.0)
                        .map(|c| (z[(i, c)] - self.col_mean[c]) / self.col_scale[c] * self.coefs[c])
                        .sum::<f64>()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 2, |i, j| ((i * (j + 3)) % 17) as f64 / 4.0 - 2.0)
    }

    #[test]
    fn basis_widths() {
        let x = grid(5);
        assert_eq!(basis_expand(&x, 1).ncols(), 4);
        assert_eq!(basis_expand(&x, 2).ncols(), 4 + 2 + 1);
        assert_eq!(basis_expand(&x, 3).ncols(), 7 + 2 + 2);
    }

    #[test]
    fn huge_lambda_shrinks_to_mean() {
        let x = grid(40);
        let y: Vec<f64> = x.row_iter().map(|r| r[0] * 3.0 + r[1].cos()).collect();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let fit = RidgeBasisRegressor::fit(&x, &y, 1e12, 2).unwrap();
        for p in fit.predict(&x).unwrap() {
            assert!((p - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn represents_cosine_and_interaction_terms() {
        let x = grid(200);
        let y: Vec<f64> = x
            .row_iter()
            .map(|r| {
                1.0 + 0.5 * r[0].cos() - r[1]
                    + 0.8 * (r[0] * r[1] + r[0] * r[1] * r[1] + r[1] * r[0] * r[0])
            })
            .collect();
        let fit = RidgeBasisRegressor::fit(&x, &y, 1e-10, 3).unwrap();
        for (p, t) in fit.predict(&x).unwrap().iter().zip(&y) {
            assert!((p - t).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let x = grid(10);
        let y = vec![0.0; 10];
        assert!(RidgeBasisRegressor::fit(&x, &y, -1.0, 2).is_err());
        assert!(RidgeBasisRegressor::fit(&x, &y, 1.0, 4).is_err());
    }
}
