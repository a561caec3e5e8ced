//! Simulation experiments: data, predictive model, oracle, estimators and
//! metrics for every `(ρ, estimator)` cell.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::Query;
use crate::explain::{baseline_value, explain};
use crate::methods::{parse_estimator, parse_model, BridgeProvider, EstimatorSpec};
use crate::metrics::{mae, mse_v_by_coalition, MetricReport};
use crate::model::{LinearModel, SharedModel};
use crate::oracle::{true_shapley_gaussian, OracleConfig};
use crate::rng::substream_seed;
use crate::sim::{gen_mvn_data, make_response, GamMoreModel, SimConfig, GAM_BETA, GAM_GAMMA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ResponseConfig {
    GamMore {
        #[serde(default = "default_beta")]
        beta: Vec<f64>,
        #[serde(default = "default_gamma")]
        gamma: Vec<f64>,
    },
    /// `coefs[0]` is the intercept.
    Linear { coefs: Vec<f64> },
}

fn default_beta() -> Vec<f64> {
    GAM_BETA.to_vec()
}

fn default_gamma() -> Vec<f64> {
    GAM_GAMMA.to_vec()
}

impl Default for ResponseConfig {
    fn default() -> Self {
        ResponseConfig::GamMore {
            beta: default_beta(),
            gamma: default_gamma(),
        }
    }
}

impl ResponseConfig {
    pub fn n_features(&self) -> usize {
        match self {
            ResponseConfig::GamMore { beta, .. } => beta.len().saturating_sub(1),
            ResponseConfig::Linear { coefs } => coefs.len().saturating_sub(1),
        }
    }

    pub fn model(&self) -> Result<SharedModel> {
        Ok(match self {
            ResponseConfig::GamMore { beta, gamma } => {
                Arc::new(GamMoreModel::new(beta.clone(), gamma.clone())?)
            }
            ResponseConfig::Linear { coefs } => {
                if coefs.len() < 2 {
                    return Err(Error::Config(
                        "linear response needs an intercept and a coefficient".into(),
                    ));
                }
                Arc::new(LinearModel::new(coefs[0], coefs[1..].to_vec())?)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorEntry {
    pub spec: String,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeSettings {
    pub command: Option<String>,
    pub pool_size: usize,
    pub timeout_seconds: f64,
}

impl Default for BridgeSettings {
    fn default() -> Self {
        BridgeSettings {
            command: None,
            pool_size: 1,
            timeout_seconds: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rho: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    /// `true` explains the response function itself; `fit:<reg>` explains
    /// a regressor trained on the noisy response.
    pub model: String,
    /// `gaussian-mc` samples from the exact feature distribution instead of
    /// the one fitted on the training data.
    pub gaussian_truth: bool,
    pub response: ResponseConfig,
    pub oracle: OracleConfig,
    pub estimators: Vec<EstimatorEntry>,
    pub bridge: BridgeSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            rho: vec![0.0, 0.3, 0.5, 0.9],
            n_train: 1000,
            n_test: 250,
            noise_sd: 1.0,
            model: "true".into(),
            gaussian_truth: false,
            response: ResponseConfig::default(),
            oracle: OracleConfig::default(),
            estimators: ["independence", "gaussian-mc", "separate:ols"]
                .iter()
                .map(|s| EstimatorEntry {
                    spec: s.to_string(),
                    label: None,
                })
                .collect(),
            bridge: BridgeSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho.is_empty() {
            return Err(Error::Config("rho grid is empty".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators configured".into()));
        }
        for e in &self.estimators {
            parse_estimator(&e.spec)?;
        }
        parse_model(&self.model)?;
        self.oracle.validate()?;
        for &rho in &self.rho {
            self.sim_config(rho, 0).validate()?;
        }
        Ok(())
    }

    fn sim_config(&self, rho: f64, rho_index: usize) -> SimConfig {
        let m = self.response.n_features();
        SimConfig {
            m,
            rho,
            n_train: self.n_train,
            n_test: self.n_test,
            noise_sd: self.noise_sd,
            beta: match &self.response {
                ResponseConfig::GamMore { beta, .. } => beta.clone(),
                ResponseConfig::Linear { coefs } => coefs.clone(),
            },
            gamma: match &self.response {
                ResponseConfig::GamMore { gamma, .. } => gamma.clone(),
                ResponseConfig::Linear { .. } => GAM_GAMMA.to_vec(),
            },
            seed: substream_seed(self.seed, &[rho_index as u64]),
        }
    }

    fn labels(&self) -> Vec<String> {
        self.estimators
            .iter()
            .map(|e| e.label.clone().unwrap_or_else(|| e.spec.clone()))
            .collect()
    }
}

/// One `(ρ, estimator)` result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub estimator: String,
    pub rho: f64,
    pub report: Option<MetricReport>,
    pub max_efficiency_residual: Option<f64>,
    pub error: Option<String>,
}

/// Oracle precision achieved for one ρ.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleSummary {
    pub rho: f64,
    pub samples: usize,
    pub max_v_se: f64,
    pub max_phi_se: f64,
    pub reached_target: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub cells: Vec<CellResult>,
    pub oracle: Vec<OracleSummary>,
    /// Seconds spent per stage, in order.
    pub stages: Vec<(String, f64)>,
}

impl ExperimentResult {
    /// The cell for `(label, rho)`.
    pub fn cell(&self, estimator: &str, rho: f64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.estimator == estimator && c.rho == rho)
    }

    pub fn mean_mae(&self, estimator: &str, rho: f64) -> Option<f64> {
        self.cell(estimator, rho)?
            .report
            .as_ref()
            .map(|r| r.mean_mae)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.error.is_some())
    }
}

/// Runs every cell. Estimator failures are recorded and the run continues;
/// setup failures (data, model, oracle) abort.
pub fn run_experiment(
    config: &ExperimentConfig,
    bridge: &BridgeProvider,
) -> Result<ExperimentResult> {
    config.validate()?;
    let specs: Vec<EstimatorSpec> = config
        .estimators
        .iter()
        .map(|e| parse_estimator(&e.spec))
        .collect::<Result<_>>()?;
    let labels = config.labels();
    let model_spec = parse_model(&config.model)?;
    let truth = config.response.model()?;
    let mut cells = Vec::new();
    let mut oracle_summaries = Vec::new();
    let mut stages = Vec::new();

    for (ri, &rho) in config.rho.iter().enumerate() {
        let t0 = Instant::now();
        let sim = config.sim_config(rho, ri);
        let data = gen_mvn_data(&sim)?;
        let y = make_response(&data.train, truth.as_ref(), config.noise_sd, sim.seed)?;
        let train = data.train.clone().with_target(y)?;
        let model = model_spec.build(&train, Some(&truth), bridge)?;
        let train = Dataset::from_matrix(train.rows().clone())?;
        let queries = Query::from_dataset(&data.test);
        stages.push((format!("setup rho={rho}"), t0.elapsed().as_secs_f64()));

        let t0 = Instant::now();
        let oracle_cfg = OracleConfig {
            seed: substream_seed(config.oracle.seed, &[config.seed, ri as u64]),
            ..config.oracle.clone()
        };
        let oracle =
            true_shapley_gaussian(model.as_ref(), &queries, &data.distribution, &oracle_cfg)?;
        let truth_expl: Vec<_> = oracle.iter().map(|o| o.explanation.clone()).collect();
        oracle_summaries.push(OracleSummary {
            rho,
            samples: oracle.iter().map(|o| o.samples).max().unwrap_or(0),
            max_v_se: oracle.iter().map(|o| o.max_v_se()).fold(0.0, f64::max),
            max_phi_se: oracle
                .iter()
                .flat_map(|o| o.phi_se.iter().copied())
                .fold(0.0, f64::max),
            reached_target: oracle.iter().all(|o| o.reached_target),
        });
        stages.push((format!("oracle rho={rho}"), t0.elapsed().as_secs_f64()));

        let phi0 = baseline_value(model.as_ref(), &train)?;
        for (ei, spec) in specs.iter().enumerate() {
            let t0 = Instant::now();
            let seed = substream_seed(config.seed, &[ri as u64, ei as u64]);
            let gaussian = config.gaussian_truth.then_some(&data.distribution);
            let outcome = spec
                .build_with(seed, bridge, gaussian)
                .and_then(|est| est.prepare(&train, &model))
                .and_then(|prepared| explain(prepared.as_ref(), model.as_ref(), phi0, &queries));
            let elapsed = t0.elapsed().as_secs_f64();
            let cell = match outcome.and_then(|out| {
                let (per, mean) = mae(&truth_expl, &out.explanations)?;
                let (mse, per_c) = mse_v_by_coalition(&out.predictions, &out.tables)?;
                let resid = out
                    .explanations
                    .iter()
                    .map(|e| e.efficiency_residual.abs())
                    .fold(0.0, f64::max);
                Ok((
                    MetricReport {
                        estimator: labels[ei].clone(),
                        per_instance_mae: per,
                        mean_mae: mean,
                        mse_v: mse,
                        per_coalition_mse: per_c
                            .into_iter()
                            .map(|(c, v)| (c.to_string(), v))
                            .collect(),
                        runtime_seconds: elapsed,
                    },
                    resid,
                ))
            }) {
                Ok((report, resid)) => CellResult {
                    estimator: labels[ei].clone(),
                    rho,
                    report: Some(report),
                    max_efficiency_residual: Some(resid),
                    error: None,
                },
                Err(e) => CellResult {
                    estimator: labels[ei].clone(),
                    rho,
                    report: None,
                    max_efficiency_residual: None,
                    error: Some(e.to_string()),
                },
            };
            stages.push((format!("{} rho={rho}", labels[ei]), elapsed));
            cells.push(cell);
        }
    }
    Ok(ExperimentResult {
        cells,
        oracle: oracle_summaries,
        stages,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

/// `estimator,rho,mean_mae,mse_v,error`; failed cells carry NaN metrics.
pub fn summary_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("estimator,rho,mean_mae,mse_v,error\n");
    for c in &result.cells {
        let (mae, mse) = c
            .report
            .as_ref()
            .map_or((f64::NAN, f64::NAN), |r| (r.mean_mae, r.mse_v));
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            csv_field(&c.estimator),
            num(c.rho),
            num(mae),
            num(mse),
            csv_field(c.error.as_deref().unwrap_or(""))
        );
    }
    out
}

/// One row per `(estimator, ρ, test instance)`.
pub fn long_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("estimator,rho,instance,mae\n");
    for c in &result.cells {
        if let Some(r) = &c.report {
            for (i, v) in r.per_instance_mae.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    csv_field(&c.estimator),
                    num(c.rho),
                    i,
                    num(*v)
                );
            }
        }
    }
    out
}

pub fn oracle_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("rho,samples,max_v_se,max_phi_se,reached_target\n");
    for o in &result.oracle {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            num(o.rho),
            o.samples,
            num(o.max_v_se),
            num(o.max_phi_se),
            o.reached_target
        );
    }
    out
}

/// Wall-clock times; kept apart from the deterministic tables.
pub fn runtime_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("estimator,rho,runtime_seconds\n");
    for c in &result.cells {
        let t = c.report.as_ref().map_or(f64::NAN, |r| r.runtime_seconds);
        let _ = writeln!(out, "{},{},{}", csv_field(&c.estimator), num(c.rho), num(t));
    }
    out
}

/// Writes `summary.csv`, `long.csv`, `oracle.csv`, `runtime.csv` and
/// `reports.json` into `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.csv"), summary_csv(result))?;
    fs::write(dir.join("long.csv"), long_csv(result))?;
    fs::write(dir.join("oracle.csv"), oracle_csv(result))?;
    fs::write(dir.join("runtime.csv"), runtime_csv(result))?;
    let json =
        serde_json::to_string_pretty(result).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(dir.join("reports.json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            rho: vec![0.0, 0.5],
            n_train: 200,
            n_test: 4,
            response: ResponseConfig::Linear {
                coefs: vec![0.5, 1.0, -1.0, 2.0],
            },
            oracle: OracleConfig {
                samples: 10_000,
                max_doublings: 0,
                ..OracleConfig::default()
            },
            estimators: vec![
                EstimatorEntry {
                    spec: "gaussian-mc:K=200".into(),
                    label: None,
                },
                EstimatorEntry {
                    spec: "separate:ols".into(),
                    label: Some("ols".into()),
                },
                EstimatorEntry {
                    spec: "separate:knn:k=500".into(),
                    label: None,
                },
            ],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = small();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("rho = []").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn failed_cells_are_recorded_and_run_is_deterministic() {
        let cfg = small();
        let bridge = BridgeProvider::default();
        let a = run_experiment(&cfg, &bridge).unwrap();
        assert_eq!(a.cells.len(), 6);
        let failed: Vec<_> = a.failures().collect();
        assert_eq!(failed.len(), 2);
        assert!(summary_csv(&a).contains("NaN"));
        let b = run_experiment(&cfg, &bridge).unwrap();
        assert_eq!(summary_csv(&a), summary_csv(&b));
        assert_eq!(long_csv(&a), long_csv(&b));
        assert_eq!(long_csv(&a).lines().count(), 1 + 4 * 4);
        assert!(a.mean_mae("ols", 0.5).unwrap() < 0.2);
    }
}
