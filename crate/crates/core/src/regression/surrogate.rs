//! Surrogate regression: one model over masked inputs for many coalitions.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Regressor, RegressorSpec};
use crate::coalition::{binomial, coalitions_of_size, full_mask, nontrivial_coalitions, Coalition};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{
    check_nontrivial, check_query, ContributionEstimator, PreparedEstimator, Query,
};
use crate::model::SharedModel;
use crate::rng::substream;

/// How masked features are presented to the regressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskEncoding {
    /// Masked values become 0 and `M` indicator columns (1 = masked) are appended.
    ZeroPlusIndicator,
    /// Masked values become NaN; no indicator columns. Needs a regressor
    /// with native missing-value support.
    MissingToken,
}

impl MaskEncoding {
    pub fn width(self, m: usize) -> usize {
        match self {
            MaskEncoding::ZeroPlusIndicator => 2 * m,
            MaskEncoding::MissingToken => m,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentationMode {
    PerCoalition,
    PerCoalitionSize,
}

/// How many masked rows to generate per coalition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub budget: usize,
    pub mode: AugmentationMode,
    pub mask_encoding: MaskEncoding,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        AugmentationPlan {
            budget: 50_000,
            mode: AugmentationMode::PerCoalition,
            mask_encoding: MaskEncoding::ZeroPlusIndicator,
        }
    }
}

impl AugmentationPlan {
    /// Rows per coalition: `floor(budget / (2^M - 2))` per coalition, or
    /// `floor(budget / C(M, size))` per coalition size.
    pub fn rows_per_coalition(&self, m: usize, size: usize) -> Result<usize> {
        if m < 2 {
            return Err(Error::InvalidInput("augmentation needs M >= 2".into()));
        }
        let denom = match self.mode {
            AugmentationMode::PerCoalition => (full_mask(m) as u64) - 1,
            AugmentationMode::PerCoalitionSize => {
                if size == 0 || size >= m {
                    return Err(Error::InvalidInput(format!(
                        "coalition size must be in 1..{m}, got {size}"
                    )));
                }
                binomial(m, size)
            }
        };
        let l = self.budget as u64 / denom;
        if l == 0 {
            return Err(Error::InvalidInput(format!(
                "budget {} too small: fewer than one row per coalition ({denom} coalitions)",
                self.budget
            )));
        }
        Ok(l as usize)
    }
}

/// One masked training row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedRow {
    pub values: Vec<f64>,
    /// 1 marks a masked feature.
    pub indicators: Vec<u8>,
    pub target: f64,
}

impl AugmentedRow {
    fn masked(x: &[f64], coalition: Coalition, encoding: MaskEncoding, target: f64) -> Self {
        let fill = match encoding {
            MaskEncoding::ZeroPlusIndicator => 0.0,
            MaskEncoding::MissingToken => f64::NAN,
        };
        let values = x
            .iter()
            .enumerate()
            .map(|(j, &v)| if coalition.contains(j) { v } else { fill })
            .collect();
        let indicators = (0..x.len())
            .map(|j| u8::from(!coalition.contains(j)))
            .collect();
        AugmentedRow {
            values,
            indicators,
            target,
        }
    }

    /// The row as regressor input under `encoding`.
    pub fn features(&self, encoding: MaskEncoding) -> Vec<f64> {
        let mut out = self.values.clone();
        if encoding == MaskEncoding::ZeroPlusIndicator {
            out.extend(self.indicators.iter().map(|&b| b as f64));
        }
        out
    }
}

/// Encodes `x*` for coalition `S` as regressor input.
pub fn encode_query(instance: &[f64], coalition: Coalition, encoding: MaskEncoding) -> Vec<f64> {
    AugmentedRow::masked(instance, coalition, encoding, 0.0).features(encoding)
}

/// For each coalition in `scope` (in the given order), samples `L` training
/// rows uniformly with replacement and masks the features outside `S`.
/// Each coalition draws from its own seeded substream.
pub fn build_augmented_dataset(
    x: &DMatrix<f64>,
    f_targets: &[f64],
    plan: &AugmentationPlan,
    scope: &[Coalition],
    seed: u64,
) -> Result<Vec<AugmentedRow>> {
    let (n, m) = (x.nrows(), x.ncols());
    if scope.is_empty() {
        return Err(Error::InvalidInput("empty coalition scope".into()));
    }
    if n == 0 || f_targets.len() != n {
        return Err(Error::Dimension(format!(
            "{} targets for {n} rows",
            f_targets.len()
        )));
    }
    if let Some(t) = f_targets.iter().find(|t| !t.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite augmentation target {t}"
        )));
    }
    let mut rows = Vec::new();
    for &c in scope {
        check_nontrivial(c, m)?;
        let l = plan.rows_per_coalition(m, c.size())?;
        let mut rng = substream(seed, &[c.mask() as u64]);
        for _ in 0..l {
            let i = if n == 1 { 0 } else { rng.random_range(0..n) };
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            rows.push(AugmentedRow::masked(
                &xi,
                c,
                plan.mask_encoding,
                f_targets[i],
            ));
        }
    }
    Ok(rows)
}

/// A fitted surrogate and the encoding it was trained with.
pub struct SurrogateModel {
    m: usize,
    encoding: MaskEncoding,
    regressor: Box<dyn Regressor>,
}

impl SurrogateModel {
    pub fn encoding(&self) -> MaskEncoding {
        self.encoding
    }

    pub fn predict_encoded(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.regressor.predict(x)
    }
}

/// Trains one regressor on the augmented rows.
pub fn fit_surrogate(
    spec: &RegressorSpec,
    rows: &[AugmentedRow],
    encoding: MaskEncoding,
) -> Result<SurrogateModel> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidInput("no augmented rows".into()))?;
    let m = first.values.len();
    if encoding == MaskEncoding::MissingToken && !spec.is_bridge() {
        return Err(Error::Regression(format!(
            "{} cannot take missing tokens; use the zero-plus-indicator encoding",
            spec.name()
        )));
    }
    for (r, row) in rows.iter().enumerate() {
        if row.values.len() != m || row.indicators.len() != m {
            return Err(Error::Dimension(format!(
                "augmented row {r} has inconsistent width"
            )));
        }
        let consistent =
            row.values
                .iter()
                .zip(&row.indicators)
                .all(|(v, &ind)| match (encoding, ind) {
                    (_, 0) => v.is_finite(),
                    (MaskEncoding::ZeroPlusIndicator, _) => *v == 0.0,
                    (MaskEncoding::MissingToken, _) => v.is_nan(),
                });
        if !consistent || !row.target.is_finite() {
            return Err(Error::InvalidInput(format!(
                "augmented row {r} does not match the {encoding:?} encoding (mixed encodings?)"
            )));
        }
    }
    let width = encoding.width(m);
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.features(encoding)).collect();
    let x = DMatrix::from_row_slice(rows.len(), width, &flat);
    let y: Vec<f64> = rows.iter().map(|r| r.target).collect();
    Ok(SurrogateModel {
        m,
        encoding,
        regressor: spec.fit(&x, &y)?,
    })
}

/// `v̂(S, x*)` from a surrogate. `encoding` must match the fit.
pub fn surrogate_contribution(
    handle: &SurrogateModel,
    query: &Query,
    coalition: Coalition,
    encoding: MaskEncoding,
) -> Result<f64> {
    if encoding != handle.encoding {
        return Err(Error::InvalidInput(format!(
            "query encoded as {encoding:?} but surrogate was fit with {:?}",
            handle.encoding
        )));
    }
    check_query(query, handle.m)?;
    let row = encode_query(&query.instance, coalition, encoding);
    Ok(handle
        .regressor
        .predict(&DMatrix::from_row_slice(1, row.len(), &row))?[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateVariant {
    /// Fit on complete rows, mask only at prediction time.
    Direct,
    /// One model over masked rows for every coalition.
    Augmented,
    /// One model per coalition size.
    AugmentedCoalition,
}

impl SurrogateVariant {
    pub fn name(self) -> &'static str {
        match self {
            SurrogateVariant::Direct => "surrogate-dir",
            SurrogateVariant::Augmented => "surrogate-aug",
            SurrogateVariant::AugmentedCoalition => "surrogate-aug-coal",
        }
    }
}

/// Surrogate regression as a [`ContributionEstimator`]. Features are
/// standardized with training moments before masking, so a zero mask sits
/// at the marginal mean.
#[derive(Clone, Debug)]
pub struct SurrogateEstimator {
    pub variant: SurrogateVariant,
    pub spec: RegressorSpec,
    pub plan: AugmentationPlan,
    pub seed: u64,
}

impl SurrogateEstimator {
    /// Uses missing tokens for bridge regressors and zero-plus-indicator
    /// otherwise.
    pub fn new(variant: SurrogateVariant, spec: RegressorSpec) -> Self {
        let mode = match variant {
            SurrogateVariant::AugmentedCoalition => AugmentationMode::PerCoalitionSize,
            _ => AugmentationMode::PerCoalition,
        };
        let mask_encoding = if spec.is_bridge() {
            MaskEncoding::MissingToken
        } else {
            MaskEncoding::ZeroPlusIndicator
        };
        SurrogateEstimator {
            variant,
            spec,
            plan: AugmentationPlan {
                mode,
                mask_encoding,
                ..AugmentationPlan::default()
            },
            seed: 0,
        }
    }

    pub fn with_plan(mut self, plan: AugmentationPlan) -> Self {
        self.plan = plan;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

struct Scaler {
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Scaler {
    fn new(train: &Dataset) -> Self {
        Scaler {
            mean: train.column_means(),
            sd: train
                .column_sds()
                .into_iter()
                .map(|s| if s > 0.0 { s } else { 1.0 })
                .collect(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - self.mean[j]) / self.sd[j])
            .collect()
    }
}

struct PreparedSurrogate {
    m: usize,
    encoding: MaskEncoding,
    scaler: Scaler,
    /// One handle for all sizes, or `models[s - 1]` for size `s`.
    models: Vec<SurrogateModel>,
    per_size: bool,
}

impl ContributionEstimator for SurrogateEstimator {
    fn label(&self) -> String {
        format!("{}:{}", self.variant.name(), self.spec.name())
    }

    fn prepare(&self, train: &Dataset, model: &SharedModel) -> Result<Box<dyn PreparedEstimator>> {
        let m = train.n_features();
        let encoding = self.plan.mask_encoding;
        let targets = model.predict(train.rows())?;
        let scaler = Scaler::new(train);
        let z = DMatrix::from_fn(train.n_rows(), m, |i, j| {
            (train.rows()[(i, j)] - scaler.mean[j]) / scaler.sd[j]
        });
        let (models, per_size) = match self.variant {
            SurrogateVariant::Direct => {
                if encoding != MaskEncoding::MissingToken {
                    return Err(Error::Config(
                        "the direct surrogate needs the missing-token encoding".into(),
                    ));
                }
                if !self.spec.is_bridge() {
                    return Err(Error::Config(format!(
                        "the direct surrogate needs a bridge regressor with missing-value support, got {}",
                        self.spec.name()
                    )));
                }
                let model = SurrogateModel {
                    m,
                    encoding,
                    regressor: self.spec.fit(&z, &targets)?,
                };
                (vec![model], false)
            }
            SurrogateVariant::Augmented => {
                let plan = AugmentationPlan {
                    mode: AugmentationMode::PerCoalition,
                    ..self.plan
                };
                let scope = nontrivial_coalitions(m)?;
                let rows = build_augmented_dataset(&z, &targets, &plan, &scope, self.seed)?;
                (vec![fit_surrogate(&self.spec, &rows, encoding)?], false)
            }
            SurrogateVariant::AugmentedCoalition => {
                let plan = AugmentationPlan {
                    mode: AugmentationMode::PerCoalitionSize,
                    ..self.plan
                };
                let models = (1..m)
                    .map(|s| {
                        let scope = coalitions_of_size(m, s)?;
                        let rows = build_augmented_dataset(&z, &targets, &plan, &scope, self.seed)?;
                        fit_surrogate(&self.spec, &rows, encoding)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (models, true)
            }
        };
        Ok(Box::new(PreparedSurrogate {
            m,
            encoding,
            scaler,
            models,
            per_size,
        }))
    }
}

impl PreparedSurrogate {
    fn handle(&self, coalition: Coalition) -> &SurrogateModel {
        if self.per_size {
            &self.models[coalition.size() - 1]
        } else {
            &self.models[0]
        }
    }
}

impl PreparedEstimator for PreparedSurrogate {
    fn contribute(&self, query: &Query, coalition: Coalition) -> Result<f64> {
        Ok(self.contribute_batch(std::slice::from_ref(query), &[coalition])?[0][0])
    }

    fn contribute_batch(
        &self,
        queries: &[Query],
        coalitions: &[Coalition],
    ) -> Result<Vec<Vec<f64>>> {
        let scaled: Vec<Vec<f64>> = queries
            .iter()
            .map(|q| check_query(q, self.m).map(|_| self.scaler.apply(&q.instance)))
            .collect::<Result<_>>()?;
        let width = self.encoding.width(self.m);
        let mut out = vec![vec![0.0; coalitions.len()]; queries.len()];
        for (ci, &c) in coalitions.iter().enumerate() {
            check_nontrivial(c, self.m)?;
            let flat: Vec<f64> = scaled
                .iter()
                .flat_map(|x| encode_query(x, c, self.encoding))
                .collect();
            let preds = self.handle(c).predict_encoded(&DMatrix::from_row_slice(
                queries.len(),
                width,
                &flat,
            ))?;
            for (i, p) in preds.into_iter().enumerate() {
                out[i][ci] = p;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_rule() {
        let plan = AugmentationPlan::default();
        assert_eq!(plan.rows_per_coalition(8, 3).unwrap(), 196);
        let per_size = AugmentationPlan {
            mode: AugmentationMode::PerCoalitionSize,
            ..plan
        };
        assert_eq!(per_size.rows_per_coalition(8, 4).unwrap(), 714);
        let tiny = AugmentationPlan {
            budget: 100,
            ..plan
        };
        assert!(tiny.rows_per_coalition(8, 1).is_err());
    }

    #[test]
    fn encoding_marks_complement() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let c = Coalition::from_features([1, 3]);
        assert_eq!(
            encode_query(&x, c, MaskEncoding::ZeroPlusIndicator),
            vec![0.0, 2.0, 0.0, 4.0, 1.0, 0.0, 1.0, 0.0]
        );
        let nan = encode_query(&x, c, MaskEncoding::MissingToken);
        assert_eq!(nan.len(), 4);
        assert!(nan[0].is_nan() && nan[2].is_nan());
        assert_eq!((nan[1], nan[3]), (2.0, 4.0));
    }

    #[test]
    fn row_counts() {
        let x = DMatrix::from_fn(10, 4, |i, j| (i + j) as f64);
        let y = vec![1.0; 10];
        let plan = AugmentationPlan {
            budget: 140,
            ..AugmentationPlan::default()
        };
        let rows =
            build_augmented_dataset(&x, &y, &plan, &nontrivial_coalitions(4).unwrap(), 1).unwrap();
        assert_eq!(rows.len(), 14 * 10);
        assert!(build_augmented_dataset(&x, &y, &plan, &[], 1).is_err());
    }

    #[test]
    fn missing_tokens_rejected_for_in_core_regressors() {
        let row = AugmentedRow::masked(
            &[1.0, 2.0],
            Coalition::from_features([0]),
            MaskEncoding::MissingToken,
            1.0,
        );
        assert!(fit_surrogate(&RegressorSpec::Ols, &[row], MaskEncoding::MissingToken).is_err());
    }

    #[test]
    fn mixed_encodings_rejected() {
        let a = AugmentedRow::masked(
            &[1.0, 2.0],
            Coalition::from_features([0]),
            MaskEncoding::MissingToken,
            1.0,
        );
        let b = AugmentedRow::masked(
            &[1.0, 2.0],
            Coalition::from_features([1]),
            MaskEncoding::ZeroPlusIndicator,
            1.0,
        );
        let err = fit_surrogate(
            &RegressorSpec::Knn { k: 1 },
            &[b, a],
            MaskEncoding::ZeroPlusIndicator,
        );
        assert!(err.is_err());
    }
}
