//! One regressor per coalition, trained to predict `f(x)` from `x_S`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{select_columns, Regressor, RegressorSpec};
use crate::coalition::{nontrivial_coalitions, Coalition};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{
    check_nontrivial, check_query, ContributionEstimator, PreparedEstimator, Query,
};
use crate::model::SharedModel;

/// The fitted per-coalition regressors, indexed by mask.
pub struct SeparateModelSet {
    m: usize,
    models: Vec<Option<Box<dyn Regressor>>>,
}

impl SeparateModelSet {
    pub fn n_features(&self) -> usize {
        self.m
    }

    pub fn get(&self, coalition: Coalition) -> Option<&dyn Regressor> {
        self.models.get(coalition.mask() as usize)?.as_deref()
    }

    pub fn len(&self) -> usize {
        self.models.iter().filter(|m| m.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn fit_one(
    spec: &RegressorSpec,
    x: &DMatrix<f64>,
    targets: &[f64],
    c: Coalition,
) -> Result<Box<dyn Regressor>> {
    let cols: Vec<usize> = c.members().collect();
    spec.fit(&select_columns(x, &cols), targets)
        .map_err(|e| Error::FitFailed {
            coalition: c,
            message: e.to_string(),
        })
}

/// Fits a regressor for every coalition in `coalitions` on `(x_S, f(x))`.
/// In-core regressors are fit in parallel.
pub fn fit_separate(
    spec: &RegressorSpec,
    train: &Dataset,
    f_targets: &[f64],
    coalitions: &[Coalition],
) -> Result<SeparateModelSet> {
    let m = train.n_features();
    if f_targets.len() != train.n_rows() {
        return Err(Error::Dimension(format!(
            "{} targets for {} training rows",
            f_targets.len(),
            train.n_rows()
        )));
    }
    for &c in coalitions {
        check_nontrivial(c, m)?;
    }
    let x = train.rows();
    let fitted: Vec<(Coalition, Box<dyn Regressor>)> = if spec.is_bridge() {
        coalitions
            .iter()
            .map(|&c| fit_one(spec, x, f_targets, c).map(|r| (c, r)))
            .collect::<Result<_>>()?
    } else {
        coalitions
            .par_iter()
            .map(|&c| fit_one(spec, x, f_targets, c).map(|r| (c, r)))
            .collect::<Result<_>>()?
    };
    let mut models: Vec<Option<Box<dyn Regressor>>> = (0..1usize << m).map(|_| None).collect();
    for (c, r) in fitted {
        models[c.mask() as usize] = Some(r);
    }
    Ok(SeparateModelSet { m, models })
}

/// `v̂(S, x*)` from the regressor fitted for `S`.
pub fn separate_contribution(
    models: &SeparateModelSet,
    query: &Query,
    coalition: Coalition,
) -> Result<f64> {
    check_query(query, models.m)?;
    let reg = models.get(coalition).ok_or_else(|| {
        Error::Estimator(format!("no regressor was fit for coalition {coalition}"))
    })?;
    let row: Vec<f64> = coalition.members().map(|j| query.instance[j]).collect();
    Ok(reg.predict(&DMatrix::from_row_slice(1, row.len(), &row))?[0])
}

fn queries_matrix(queries: &[Query], coalition: Coalition) -> DMatrix<f64> {
    let cols: Vec<usize> = coalition.members().collect();
    DMatrix::from_fn(queries.len(), cols.len(), |i, j| {
        queries[i].instance[cols[j]]
    })
}

/// Separate regression as a [`ContributionEstimator`].
#[derive(Clone, Debug)]
pub struct SeparateEstimator {
    pub spec: RegressorSpec,
}

impl SeparateEstimator {
    pub fn new(spec: RegressorSpec) -> Self {
        SeparateEstimator { spec }
    }
}

impl ContributionEstimator for SeparateEstimator {
    fn label(&self) -> String {
        format!("separate:{}", self.spec.name())
    }

    fn prepare(&self, train: &Dataset, model: &SharedModel) -> Result<Box<dyn PreparedEstimator>> {
        let targets = model.predict(train.rows())?;
        if self.spec.is_bridge() {
            return Ok(Box::new(LazySeparate {
                spec: self.spec.clone(),
                train: train.clone(),
                targets,
            }));
        }
        let coalitions = nontrivial_coalitions(train.n_features())?;
        Ok(Box::new(fit_separate(
            &self.spec,
            train,
            &targets,
            &coalitions,
        )?))
    }
}

fn transpose(per_coalition: Vec<Vec<f64>>, n_queries: usize) -> Vec<Vec<f64>> {
    (0..n_queries)
        .map(|i| per_coalition.iter().map(|col| col[i]).collect())
        .collect()
}

impl PreparedEstimator for SeparateModelSet {
    fn contribute(&self, query: &Query, coalition: Coalition) -> Result<f64> {
        separate_contribution(self, query, coalition)
    }

    fn contribute_batch(
        &self,
        queries: &[Query],
        coalitions: &[Coalition],
    ) -> Result<Vec<Vec<f64>>> {
        for q in queries {
            check_query(q, self.m)?;
        }
        let per: Vec<Vec<f64>> = coalitions
            .par_iter()
            .map(|&c| {
                let reg = self.get(c).ok_or_else(|| {
                    Error::Estimator(format!("no regressor was fit for coalition {c}"))
                })?;
                reg.predict(&queries_matrix(queries, c))
            })
            .collect::<Result<_>>()?;
        Ok(transpose(per, queries.len()))
    }
}

/// Bridge-backed separate regression: each coalition's context is fit,
/// queried for every instance and released before the next one, so at most
/// one remote model per coalition is alive at a time.
struct LazySeparate {
    spec: RegressorSpec,
    train: Dataset,
    targets: Vec<f64>,
}

impl PreparedEstimator for LazySeparate {
    fn contribute(&self, query: &Query, coalition: Coalition) -> Result<f64> {
        Ok(self.contribute_batch(std::slice::from_ref(query), &[coalition])?[0][0])
    }

    fn contribute_batch(
        &self,
        queries: &[Query],
        coalitions: &[Coalition],
    ) -> Result<Vec<Vec<f64>>> {
        let m = self.train.n_features();
        for q in queries {
            check_query(q, m)?;
        }
        let mut per = Vec::with_capacity(coalitions.len());
        for &c in coalitions {
            check_nontrivial(c, m)?;
            let reg = fit_one(&self.spec, self.train.rows(), &self.targets, c)?;
            per.push(
                reg.predict(&queries_matrix(queries, c))
                    .map_err(|e| match e {
                        e @ Error::Bridge(_) => e,
                        e => Error::FitFailed {
                            coalition: c,
                            message: e.to_string(),
                        },
                    })?,
            );
        }
        Ok(transpose(per, queries.len()))
    }
}
