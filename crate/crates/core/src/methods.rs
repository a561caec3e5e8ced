//! Compact string specs for estimators and models.
//!
//! ```text
//! estimator := mc-kind [":" key "=" value]*
//!            | "mean"
//!            | reg-kind ":" regressor [":" key "=" value]*
//! mc-kind   := "independence" | "empirical" | "gaussian-mc"
//! reg-kind  := "separate" | "surrogate-dir" | "surrogate-aug" | "surrogate-aug-coal"
//! regressor := "ols" | "ridge-basis" | "knn" | "bridge:" backend
//! model     := "linear:" b0 "," b1 "," ... | "gam-more" | "true" | "fit:" regressor [":" key "=" value]*
//! ```
//!
//! Keys: `K`, `neighbors`, `bandwidth`, `seed` for Monte Carlo; `lambda`,
//! `degree`, `k`, `ens` for regressors; `budget`, `encoding=zero|nan` for
//! surrogates.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::bridge::{BridgePool, SessionConfig, DEFAULT_SIDECAR_CMD};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{ContributionEstimator, MeanEstimator};
use crate::mc::{GaussianModel, McConfig, MonteCarloEstimator, SamplerKind};
use crate::model::{FittedModel, LinearModel, SharedModel};
use crate::regression::{
    AugmentationMode, MaskEncoding, RegressorSpec, SeparateEstimator, SurrogateEstimator,
    SurrogateVariant,
};
use crate::sim::{GamMoreModel, GAM_BETA, GAM_GAMMA};

pub const SPEC_HELP: &str = "\
estimator specs:
  independence | empirical | gaussian-mc   [:K=1000][:neighbors=100][:bandwidth=0.1][:seed=N]
  mean
  separate:<reg>                           one regressor per coalition
  surrogate-dir:<reg>                      full-data model, features masked at prediction (bridge only)
  surrogate-aug:<reg>                      one model over masked rows [:budget=50000][:encoding=zero|nan]
  surrogate-aug-coal:<reg>                 one model per coalition size [:budget=50000][:encoding=zero|nan]
regressors <reg>:
  ols | ridge-basis[:lambda=0.001][:degree=2] | knn[:k=10] | bridge:<backend>[:ens=1]
model specs:
  linear:b0,b1,...,bM | gam-more | true | fit:<reg>";

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq)]
pub enum RegressorToken {
    Ols,
    RidgeBasis,
    Knn,
    Bridge(String),
}

/// A parsed regressor with its options.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorChoice {
    pub token: RegressorToken,
    pub lambda: Option<f64>,
    pub degree: Option<usize>,
    pub k: Option<usize>,
    pub ens: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EstimatorKind {
    Mc(SamplerKind),
    Mean,
    Separate,
    Surrogate(SurrogateVariant),
}

/// A parsed estimator spec.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorSpec {
    pub text: String,
    pub kind: EstimatorKind,
    pub regressor: Option<RegressorChoice>,
    pub samples: Option<usize>,
    pub neighbors: Option<usize>,
    pub bandwidth: Option<f64>,
    pub seed: Option<u64>,
    pub budget: Option<usize>,
    pub encoding: Option<MaskEncoding>,
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| config_err(format!("bad value `{value}` for `{key}`: {e}")))
}

fn split_options<'a>(tokens: impl Iterator<Item = &'a str>) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for t in tokens {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| config_err(format!("expected key=value, got `{t}`")))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(config_err(format!("option `{k}` given twice")));
        }
    }
    Ok(out)
}

/// Parses `<reg>[:opts]` from the front of `tokens`; returns the choice
/// and the leftover options.
fn parse_regressor<'a, I: Iterator<Item = &'a str>>(
    tokens: &mut std::iter::Peekable<I>,
) -> Result<(RegressorChoice, BTreeMap<String, String>)> {
    let name = tokens
        .next()
        .ok_or_else(|| config_err("missing regressor (ols, ridge-basis, knn, bridge:<backend>)"))?;
    let token = match name {
        "ols" => RegressorToken::Ols,
        "ridge-basis" | "ridge" => RegressorToken::RidgeBasis,
        "knn" => RegressorToken::Knn,
        "bridge" => {
            let backend = tokens.next().filter(|b| !b.contains('=')).ok_or_else(|| {
                config_err("bridge regressor needs a backend name, e.g. bridge:ols-ref")
            })?;
            RegressorToken::Bridge(backend.to_string())
        }
        other => return Err(config_err(format!("unknown regressor `{other}`"))),
    };
    let mut opts = split_options(tokens)?;
    let mut take = |k: &str| opts.remove(k);
    let choice = RegressorChoice {
        lambda: take("lambda")
            .map(|v| parse_value("lambda", &v))
            .transpose()?,
        degree: take("degree")
            .map(|v| parse_value("degree", &v))
            .transpose()?,
        k: take("k").map(|v| parse_value("k", &v)).transpose()?,
        ens: take("ens").map(|v| parse_value("ens", &v)).transpose()?,
        token,
    };
    if choice.k.is_some() && choice.token != RegressorToken::Knn {
        return Err(config_err("`k` only applies to knn"));
    }
    if choice.ens.is_some() && !matches!(choice.token, RegressorToken::Bridge(_)) {
        return Err(config_err("`ens` only applies to bridge regressors"));
    }
    if (choice.lambda.is_some() || choice.degree.is_some())
        && choice.token != RegressorToken::RidgeBasis
    {
        return Err(config_err(
            "`lambda` and `degree` only apply to ridge-basis",
        ));
    }
    Ok((choice, opts))
}

pub fn parse_estimator(text: &str) -> Result<EstimatorSpec> {
    let text = text.trim();
    let mut tokens = text.split(':').peekable();
    let head = tokens.next().unwrap_or_default();
    let kind = match head {
        "independence" => EstimatorKind::Mc(SamplerKind::Independence),
        "empirical" => EstimatorKind::Mc(SamplerKind::Empirical),
        "gaussian-mc" | "gaussian" => EstimatorKind::Mc(SamplerKind::Gaussian),
        "mean" => EstimatorKind::Mean,
        "separate" => EstimatorKind::Separate,
        "surrogate-dir" => EstimatorKind::Surrogate(SurrogateVariant::Direct),
        "surrogate-aug" => EstimatorKind::Surrogate(SurrogateVariant::Augmented),
        "surrogate-aug-coal" => EstimatorKind::Surrogate(SurrogateVariant::AugmentedCoalition),
        "" => return Err(config_err("empty estimator spec")),
        other => {
            return Err(config_err(format!(
                "unknown estimator `{other}`\n{SPEC_HELP}"
            )))
        }
    };
    let (regressor, mut opts) = match kind {
        EstimatorKind::Separate | EstimatorKind::Surrogate(_) => {
            let (r, o) = parse_regressor(&mut tokens)?;
            (Some(r), o)
        }
        _ => (None, split_options(tokens)?),
    };
    let mut take = |k: &str| opts.remove(k);
    let spec = EstimatorSpec {
        text: text.to_string(),
        samples: take("K").map(|v| parse_value("K", &v)).transpose()?,
        neighbors: take("neighbors")
            .map(|v| parse_value("neighbors", &v))
            .transpose()?,
        bandwidth: take("bandwidth")
            .map(|v| parse_value("bandwidth", &v))
            .transpose()?,
        seed: take("seed").map(|v| parse_value("seed", &v)).transpose()?,
        budget: take("budget")
            .map(|v| parse_value("budget", &v))
            .transpose()?,
        encoding: take("encoding")
            .map(|v| match v.as_str() {
                "zero" => Ok(MaskEncoding::ZeroPlusIndicator),
                "nan" => Ok(MaskEncoding::MissingToken),
                other => Err(config_err(format!(
                    "encoding must be zero or nan, got `{other}`"
                ))),
            })
            .transpose()?,
        kind,
        regressor,
    };
    if let Some(k) = opts.keys().next() {
        return Err(config_err(format!("unknown option `{k}` in `{text}`")));
    }
    let is_mc = matches!(spec.kind, EstimatorKind::Mc(_));
    if !is_mc && (spec.samples.is_some() || spec.neighbors.is_some() || spec.bandwidth.is_some()) {
        return Err(config_err(
            "`K`, `neighbors` and `bandwidth` only apply to Monte Carlo estimators",
        ));
    }
    let is_surrogate = matches!(spec.kind, EstimatorKind::Surrogate(_));
    if !is_surrogate && (spec.budget.is_some() || spec.encoding.is_some()) {
        return Err(config_err(
            "`budget` and `encoding` only apply to surrogate estimators",
        ));
    }
    Ok(spec)
}

/// Lazily spawned bridge pool shared by every bridge-backed regressor.
pub struct BridgeProvider {
    command: Option<String>,
    size: usize,
    config: SessionConfig,
    pool: Mutex<Option<Arc<BridgePool>>>,
}

impl BridgeProvider {
    /// `command = None` falls back to `$CONDSHAP_BRIDGE_CMD`, then the
    /// default sidecar name.
    pub fn new(command: Option<String>, size: usize, config: SessionConfig) -> Self {
        BridgeProvider {
            command,
            size,
            config,
            pool: Mutex::new(None),
        }
    }

    pub fn from_pool(pool: Arc<BridgePool>) -> Self {
        BridgeProvider {
            command: None,
            size: pool.size(),
            config: SessionConfig::default(),
            pool: Mutex::new(Some(pool)),
        }
    }

    pub fn pool(&self) -> Result<Arc<BridgePool>> {
        let mut guard = self.pool.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(p) = guard.as_ref() {
            return Ok(p.clone());
        }
        let pool = Arc::new(match &self.command {
            Some(cmd) => BridgePool::spawn_exact(cmd, self.size, self.config.clone())?,
            None => BridgePool::spawn(DEFAULT_SIDECAR_CMD, self.size, self.config.clone())?,
        });
        *guard = Some(pool.clone());
        Ok(pool)
    }
}

impl Default for BridgeProvider {
    fn default() -> Self {
        BridgeProvider::new(None, 1, SessionConfig::default())
    }
}

impl RegressorChoice {
    pub fn to_spec(&self, bridge: &BridgeProvider) -> Result<RegressorSpec> {
        Ok(match &self.token {
            RegressorToken::Ols => RegressorSpec::Ols,
            RegressorToken::RidgeBasis => {
                let d = RegressorSpec::ridge_basis();
                let RegressorSpec::RidgeBasis { lambda, degree } = d else {
                    unreachable!()
                };
                RegressorSpec::RidgeBasis {
                    lambda: self.lambda.unwrap_or(lambda),
                    degree: self.degree.unwrap_or(degree),
                }
            }
            RegressorToken::Knn => RegressorSpec::Knn {
                k: self.k.unwrap_or(10),
            },
            RegressorToken::Bridge(backend) => {
                let pool = bridge.pool()?;
                let info = pool.capabilities().backend(backend).ok_or_else(|| {
                    Error::Bridge(crate::bridge::BridgeError::new(
                        crate::bridge::ErrorCode::UnknownBackend,
                        format!(
                            "sidecar does not offer `{backend}`; available: {}",
                            pool.capabilities()
                                .backends
                                .iter()
                                .map(|b| b.name.as_str())
                                .collect::<Vec<_>>()
                                .join(", ")
                        ),
                    ))
                })?;
                RegressorSpec::Bridge {
                    backend: backend.clone(),
                    ensemble_size: self.ens.unwrap_or(info.default_ensemble),
                    pool,
                }
            }
        })
    }
}

impl EstimatorSpec {
    pub fn is_bridge(&self) -> bool {
        matches!(
            self.regressor,
            Some(RegressorChoice {
                token: RegressorToken::Bridge(_),
                ..
            })
        )
    }

    /// Monte Carlo settings with defaults filled in.
    pub fn mc_config(&self, seed: u64) -> Result<McConfig> {
        let d = McConfig::default();
        let config = McConfig {
            samples: self.samples.unwrap_or(d.samples),
            seed: self.seed.unwrap_or(seed),
            empirical_neighbors: self.neighbors.unwrap_or(d.empirical_neighbors),
            empirical_bandwidth: self.bandwidth.unwrap_or(d.empirical_bandwidth),
        };
        config.validate()?;
        Ok(config)
    }

    /// Builds the estimator. `seed` is used unless the spec sets its own.
    pub fn build(
        &self,
        seed: u64,
        bridge: &BridgeProvider,
    ) -> Result<Box<dyn ContributionEstimator>> {
        self.build_with(seed, bridge, None)
    }

    /// Like [`build`](Self::build); `gaussian` replaces the fitted
    /// distribution of a `gaussian-mc` estimator.
    pub fn build_with(
        &self,
        seed: u64,
        bridge: &BridgeProvider,
        gaussian: Option<&GaussianModel>,
    ) -> Result<Box<dyn ContributionEstimator>> {
        let config_seed = seed;
        let seed = self.seed.unwrap_or(seed);
        Ok(match &self.kind {
            EstimatorKind::Mc(kind) => {
                let est = MonteCarloEstimator::new(*kind, self.mc_config(config_seed)?);
                match (kind, gaussian) {
                    (SamplerKind::Gaussian, Some(g)) => Box::new(est.with_gaussian(g.clone())),
                    _ => Box::new(est),
                }
            }
            EstimatorKind::Mean => Box::new(MeanEstimator),
            EstimatorKind::Separate => {
                let reg = self
                    .regressor
                    .as_ref()
                    .expect("parsed with a regressor")
                    .to_spec(bridge)?;
                Box::new(SeparateEstimator::new(reg))
            }
            EstimatorKind::Surrogate(variant) => {
                let reg = self
                    .regressor
                    .as_ref()
                    .expect("parsed with a regressor")
                    .to_spec(bridge)?;
                let mut est = SurrogateEstimator::new(*variant, reg).with_seed(seed);
                if let Some(b) = self.budget {
                    est.plan.budget = b;
                }
                if let Some(e) = self.encoding {
                    est.plan.mask_encoding = e;
                }
                if *variant == SurrogateVariant::AugmentedCoalition {
                    est.plan.mode = AugmentationMode::PerCoalitionSize;
                }
                Box::new(est)
            }
        })
    }
}

/// A parsed model spec.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Linear {
        intercept: f64,
        coefs: Vec<f64>,
    },
    GamMore,
    /// The data-generating function of a simulation.
    True,
    Fit(RegressorChoice),
}

pub fn parse_model(text: &str) -> Result<ModelSpec> {
    let text = text.trim();
    let (head, rest) = text.split_once(':').unwrap_or((text, ""));
    match head {
        "linear" => {
            let vals: Vec<f64> = rest
                .split(',')
                .map(|v| parse_value("linear coefficient", v.trim()))
                .collect::<Result<_>>()?;
            if vals.len() < 2 {
                return Err(config_err(
                    "linear model needs an intercept and at least one coefficient",
                ));
            }
            Ok(ModelSpec::Linear {
                intercept: vals[0],
                coefs: vals[1..].to_vec(),
            })
        }
        "gam-more" if rest.is_empty() => Ok(ModelSpec::GamMore),
        "true" if rest.is_empty() => Ok(ModelSpec::True),
        "fit" => {
            let mut tokens = rest.split(':').peekable();
            let (choice, opts) = parse_regressor(&mut tokens)?;
            if let Some(k) = opts.keys().next() {
                return Err(config_err(format!("unknown option `{k}` in model spec")));
            }
            Ok(ModelSpec::Fit(choice))
        }
        "" => Err(config_err("empty model spec")),
        other => Err(config_err(format!("unknown model `{other}`\n{SPEC_HELP}"))),
    }
}

impl ModelSpec {
    /// Builds `f` for `m` features. `fit:` trains on `train`'s target;
    /// `true` needs `truth`.
    pub fn build(
        &self,
        train: &Dataset,
        truth: Option<&SharedModel>,
        bridge: &BridgeProvider,
    ) -> Result<SharedModel> {
        let m = train.n_features();
        Ok(match self {
            ModelSpec::Linear { intercept, coefs } => {
                if coefs.len() != m {
                    return Err(config_err(format!(
                        "linear model has {} coefficients but the data has {m} features",
                        coefs.len()
                    )));
                }
                Arc::new(LinearModel::new(*intercept, coefs.clone())?)
            }
            ModelSpec::GamMore => {
                if m != GAM_BETA.len() - 1 {
                    return Err(config_err(format!(
                        "gam-more needs {} features, data has {m}",
                        GAM_BETA.len() - 1
                    )));
                }
                Arc::new(GamMoreModel::new(GAM_BETA.to_vec(), GAM_GAMMA.to_vec())?)
            }
            ModelSpec::True => truth
                .cloned()
                .ok_or_else(|| config_err("model `true` is only available in simulations"))?,
            ModelSpec::Fit(choice) => {
                let y = train.target().ok_or_else(|| {
                    config_err("fitting a model needs a target column in the training data")
                })?;
                let spec = choice.to_spec(bridge)?;
                let label = format!("fit:{}", spec.name());
                Arc::new(FittedModel::new(m, label, spec.fit(train.rows(), y)?))
            }
        })
    }
}
