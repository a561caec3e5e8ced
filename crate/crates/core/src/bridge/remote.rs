use std::sync::Arc;

use nalgebra::DMatrix;

use super::{BridgeError, BridgePool, ErrorCode, FitOptions};
use crate::error::Result;
use crate::regression::Regressor;

/// A regressor whose fit and predict run on a bridge backend.
///
/// The training context is kept locally so the model can be re-sent when the
/// session that holds it has evicted it, or when a different pooled session
/// serves the prediction.
pub struct BridgeRegressor {
    pool: Arc<BridgePool>,
    backend: String,
    ensemble_size: u32,
    model_id: String,
    x: DMatrix<f64>,
    y: Vec<f64>,
    options: FitOptions,
}

impl BridgeRegressor {
    pub fn fit(
        pool: Arc<BridgePool>,
        backend: &str,
        ensemble_size: u32,
        x: &DMatrix<f64>,
        y: &[f64],
    ) -> Result<Self> {
        Self::fit_with(pool, backend, ensemble_size, x, y, FitOptions::default())
    }

    pub fn fit_with(
        pool: Arc<BridgePool>,
        backend: &str,
        ensemble_size: u32,
        x: &DMatrix<f64>,
        y: &[f64],
        options: FitOptions,
    ) -> Result<Self> {
        let reg = BridgeRegressor {
            model_id: pool.fresh_model_id(backend),
            pool,
            backend: backend.to_string(),
            ensemble_size: ensemble_size.max(1),
            x: x.clone(),
            y: y.to_vec(),
            options,
        };
        {
            let mut s = reg.pool.acquire();
            s.remote_fit(
                &reg.model_id,
                &reg.backend,
                reg.ensemble_size,
                &reg.x,
                &reg.y,
                &reg.options,
            )?;
        }
        Ok(reg)
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }
}

impl Regressor for BridgeRegressor {
    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let mut s = self.pool.acquire();
        for attempt in 0..2 {
            if !s.is_resident(&self.model_id) {
                s.remote_fit(
                    &self.model_id,
                    &self.backend,
                    self.ensemble_size,
                    &self.x,
                    &self.y,
                    &self.options,
                )?;
            }
            match s.remote_predict(&self.model_id, x) {
                Err(e) if e.code == ErrorCode::UnknownModel && attempt == 0 => continue,
                r => return Ok(r?),
            }
        }
        Err(BridgeError::new(ErrorCode::UnknownModel, "model vanished after refit").into())
    }
}

impl Drop for BridgeRegressor {
    fn drop(&mut self) {
        if let Some(mut s) = self.pool.try_acquire() {
            if s.is_resident(&self.model_id) {
                let _ = s.release(&self.model_id);
            }
        }
    }
}
