use nalgebra::DMatrix;

use super::{check_width, check_xy, Regressor};
use crate::data::column_sds;
use crate::error::{Error, Result};

/// Average target of the `k` nearest training rows under Euclidean distance
/// on standardized columns. Ties break by training row order.
#[derive(Clone, Debug)]
pub struct KnnRegressor {
    k: usize,
    x: DMatrix<f64>,
    y: Vec<f64>,
    scale: Vec<f64>,
}

impl KnnRegressor {
    pub fn fit(x: &DMatrix<f64>, y: &[f64], k: usize) -> Result<Self> {
        check_xy(x, y)?;
        if k == 0 || k > x.nrows() {
            return Err(Error::Regression(format!(
                "knn needs 1 <= k <= N = {}, got k = {k}",
                x.nrows()
            )));
        }
        let scale = column_sds(x)
            .into_iter()
            .map(|s| if s > 0.0 { s } else { 1.0 })
            .collect();
        Ok(KnnRegressor {
            k,
            x: x.clone(),
            y: y.to_vec(),
            scale,
        })
    }
}

impl Regressor for KnnRegressor {
    fn predict(&self, q: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_width(q, self.x.ncols())?;
        let n = self.x.nrows();
        Ok(q.row_iter()
            .map(|row| {
                let mut d: Vec<(f64, usize)> = (0..n)
                    .map(|i| {
                        let d2: f64 = (0..self.x.ncols())
                            .map(|j| ((row[j] - self.x[(i, j)]) / self.scale[j]).powi(2))
                            .sum();
                        (d2, i)
                    })
                    .collect();
                let order =
                    |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if self.k < n {
                    d.select_nth_unstable_by(self.k - 1, order);
                }
                d[..self.k].iter().map(|&(_, i)| self.y[i]).sum::<f64>() / self.k as f64
            })
            .collect())
    }
}
