use nalgebra::{DMatrix, DVector};

use super::{check_width, check_xy, Regressor};
use crate::error::{Error, Result};

/// Ordinary least squares with an intercept, solved through a QR
/// factorization of the design matrix.
#[derive(Clone, Debug)]
pub struct OlsRegressor {
    pub intercept: f64,
    pub coefs: Vec<f64>,
}

impl OlsRegressor {
    pub fn fit(x: &DMatrix<f64>, y: &[f64]) -> Result<Self> {
        check_xy(x, y)?;
        let (n, p) = (x.nrows(), x.ncols() + 1);
        if n < p {
            return Err(Error::Regression(format!(
                "ols needs at least {p} rows for {} features, got {n}; use ridge-basis",
                p - 1
            )));
        }
        let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
        let qr = design.qr();
        let r = qr.r();
        let max_diag = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        let tol = max_diag * 1e-10 * n as f64;
        if (0..p).any(|i| r[(i, i)].abs() <= tol) || max_diag == 0.0 {
            return Err(Error::Regression(
                "design matrix is rank deficient; use ridge-basis (lambda > 0) instead".into(),
            ));
        }
        let mut qty = DVector::from_column_slice(y);
        qr.q_tr_mul(&mut qty);
        let rhs = qty.rows(0, p).into_owned();
        let beta = r
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::Regression("singular triangular factor".into()))?;
        Ok(OlsRegressor {
            intercept: beta[0],
            coefs: beta.iter().skip(1).copied().collect(),
        })
    }
}

impl Regressor for OlsRegressor {
    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_width(x, self.coefs.len())?;
        Ok(x.row_iter()
            .map(|row| {
                self.intercept + row.iter().zip(&self.coefs).map(|(v, b)| v * b).sum::<f64>()
            })
            .collect())
    }
}
