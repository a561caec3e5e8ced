use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use condshap::bridge::SessionConfig;
use condshap::data::{load_csv, CsvSchema};
use condshap::experiment::{run_experiment, write_outputs, ExperimentConfig};
use condshap::explain::{baseline_value, explain as explain_pipeline, ExplainOutput};
use condshap::methods::{parse_estimator, parse_model, BridgeProvider, ModelSpec};
use condshap::metrics::mse_v;
use condshap::{Coalition, CoalitionTable, Dataset, Error, Query, SharedModel};

use crate::manifest::Recorder;
use crate::{DataArgs, EvaluateArgs, ExplainArgs, SimulateArgs};

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    fn config(e: impl std::fmt::Display) -> Self {
        Failure::new(2, e.to_string())
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Failure::new(3, format!("{}: {e}", path.display()))
    }
}

/// Exit 4 for bridge failures, 3 for anything else raised while estimating.
fn run_failure(e: Error) -> Failure {
    Failure::new(if e.is_bridge() { 4 } else { 3 }, e.to_string())
}

type Outcome<T = ()> = Result<T, Failure>;

fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

fn prepare_out(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn write(dir: &Path, name: &str, body: &str, rec: &mut Recorder) -> Outcome {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| Failure::io(&path, e))?;
    rec.output(name);
    Ok(())
}

fn bridge_provider(common: &DataArgs) -> BridgeProvider {
    let cfg = SessionConfig {
        timeout: Duration::from_secs_f64(common.bridge_timeout.max(0.001)),
        ..SessionConfig::default()
    };
    BridgeProvider::new(common.bridge.clone(), common.bridge_pool.max(1), cfg)
}

fn load_train(common: &DataArgs) -> Outcome<Dataset> {
    let schema = CsvSchema {
        require_target: common.target.is_some(),
        target: common.target.clone(),
        categorical: common.categorical.clone(),
    };
    load_csv(&common.data, &schema)
        .map_err(|e| Failure::config(format!("{}: {e}", common.data.display())))
}

fn load_instances(path: &Path, common: &DataArgs, train: &Dataset) -> Outcome<Dataset> {
    let schema = CsvSchema {
        target: common.target.clone(),
        require_target: false,
        categorical: common.categorical.clone(),
    };
    let data =
        load_csv(path, &schema).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    if data.feature_names() != train.feature_names() {
        return Err(Failure::config(format!(
            "{}: feature columns {:?} differ from the training data {:?}",
            path.display(),
            data.feature_names(),
            train.feature_names()
        )));
    }
    Ok(data)
}

fn build_model(text: &str, train: &Dataset, bridge: &BridgeProvider) -> Outcome<SharedModel> {
    let spec = parse_model(text).map_err(Failure::config)?;
    if spec == ModelSpec::True {
        return Err(Failure::config(
            "model `true` is only available in `simulate`",
        ));
    }
    spec.build(train, None, bridge).map_err(|e| match e {
        Error::Config(_) => Failure::config(e),
        e => run_failure(e),
    })
}

fn run_estimator(
    text: &str,
    seed: u64,
    train: &Dataset,
    model: &SharedModel,
    queries: &[Query],
    bridge: &BridgeProvider,
) -> Outcome<ExplainOutput> {
    let spec = parse_estimator(text).map_err(Failure::config)?;
    let estimator = spec.build(seed, bridge).map_err(run_failure)?;
    let phi0 = baseline_value(model.as_ref(), train).map_err(run_failure)?;
    let prepared = estimator.prepare(train, model).map_err(run_failure)?;
    explain_pipeline(prepared.as_ref(), model.as_ref(), phi0, queries).map_err(run_failure)
}

fn explanations_csv(out: &ExplainOutput, queries: &[Query], m: usize) -> String {
    let mut s = String::from("instance_id,phi0");
    for j in 1..=m {
        let _ = write!(s, ",phi_{j}");
    }
    s.push_str(",efficiency_residual\n");
    for (q, e) in queries.iter().zip(&out.explanations) {
        let _ = write!(s, "{},{}", q.index, num(e.phi0));
        for p in &e.phis {
            let _ = write!(s, ",{}", num(*p));
        }
        let _ = writeln!(s, ",{}", num(e.efficiency_residual));
    }
    s
}

/// Every coalition including `∅` and the grand coalition, so the file alone
/// determines `MSE_v`.
fn coalitions_csv(out: &ExplainOutput, queries: &[Query]) -> String {
    let mut s = String::from("instance_id,mask,coalition,size,v\n");
    for (q, table) in queries.iter().zip(&out.tables) {
        for (c, v) in table.entries() {
            let _ = writeln!(
                s,
                "{},{},\"{c}\",{},{}",
                q.index,
                c.mask(),
                c.size(),
                num(v)
            );
        }
    }
    s
}

fn read_dump(path: &Path) -> Outcome<(Vec<f64>, Vec<CoalitionTable>)> {
    let bad = |msg: String| Failure::config(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut rows: Vec<(usize, u32, f64)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |k: usize| {
            rec.get(k)
                .ok_or_else(|| bad(format!("row {}: missing column {k}", i + 1)))
        };
        let parse_err = |e: &dyn std::fmt::Display| bad(format!("row {}: {e}", i + 1));
        let inst: usize = field(0)?.parse().map_err(|e| parse_err(&e))?;
        let mask: u32 = field(1)?.parse().map_err(|e| parse_err(&e))?;
        let v: f64 = field(4)?.parse().map_err(|e| parse_err(&e))?;
        rows.push((inst, mask, v));
    }
    let max_mask = rows
        .iter()
        .map(|r| r.1)
        .max()
        .ok_or_else(|| bad("no rows".into()))?;
    let m = (32 - max_mask.leading_zeros()) as usize;
    let mut order: Vec<usize> = Vec::new();
    for r in &rows {
        if !order.contains(&r.0) {
            order.push(r.0);
        }
    }
    let mut f_values = Vec::with_capacity(order.len());
    let mut tables = Vec::with_capacity(order.len());
    for inst in order {
        let mut t = CoalitionTable::new(m).map_err(Failure::config)?;
        for &(_, mask, v) in rows.iter().filter(|r| r.0 == inst) {
            t.set(Coalition::from_mask(mask), v);
        }
        if !t.is_complete() {
            return Err(bad(format!(
                "instance {inst}: coalition table is incomplete"
            )));
        }
        f_values.push(t.v_full().expect("complete table"));
        tables.push(t);
    }
    Ok((f_values, tables))
}

pub fn explain(args: &ExplainArgs) -> Outcome {
    let common = &args.common;
    let mut rec = Recorder::new("explain", None, common.seed);
    let bridge = bridge_provider(common);
    let start = Instant::now();
    let train = load_train(common)?;
    let instances = load_instances(&args.instances, common, &train)?;
    parse_estimator(&args.estimator).map_err(Failure::config)?;
    rec.record("load", start.elapsed().as_secs_f64());
    prepare_out(&common.out)?;

    let model = rec.stage("model", || build_model(&args.model, &train, &bridge))?;
    let queries = Query::from_dataset(&instances);
    let out = rec.stage("estimate", || {
        run_estimator(
            &args.estimator,
            common.seed,
            &train,
            &model,
            &queries,
            &bridge,
        )
    })?;

    let m = train.n_features();
    write(
        &common.out,
        "explanations.csv",
        &explanations_csv(&out, &queries, m),
        &mut rec,
    )?;
    if args.dump_coalitions {
        write(
            &common.out,
            "coalitions.csv",
            &coalitions_csv(&out, &queries),
            &mut rec,
        )?;
    }
    rec.finish(&common.out)
        .map_err(|e| Failure::io(&common.out, e))
}

pub fn evaluate(args: &EvaluateArgs) -> Outcome {
    let common = &args.common;
    if args.estimators.is_empty() && args.score_dump.is_empty() {
        return Err(Failure::config(
            "nothing to evaluate: pass --estimator or --score-dump",
        ));
    }
    for e in &args.estimators {
        parse_estimator(e).map_err(Failure::config)?;
    }
    let mut rec = Recorder::new("evaluate", None, common.seed);
    let bridge = bridge_provider(common);
    prepare_out(&common.out)?;
    let mut table = String::from("estimator,mse_v,time_seconds\n");

    if !args.estimators.is_empty() {
        let model_text = args
            .model
            .as_deref()
            .ok_or_else(|| Failure::config("--estimator needs --model"))?;
        let train = load_train(common)?;
        let instances = match &args.instances {
            Some(p) => load_instances(p, common, &train)?,
            None => train.clone(),
        };
        let model = rec.stage("model", || build_model(model_text, &train, &bridge))?;
        let queries = Query::from_dataset(&instances);
        for (i, text) in args.estimators.iter().enumerate() {
            let start = Instant::now();
            let out = run_estimator(text, common.seed, &train, &model, &queries, &bridge)?;
            let secs = start.elapsed().as_secs_f64();
            rec.record(&format!("estimate:{text}"), secs);
            let score = mse_v(&out.predictions, &out.tables).map_err(run_failure)?;
            let _ = writeln!(table, "\"{text}\",{},{}", num(score), num(secs));
            if args.dump_coalitions {
                write(
                    &common.out,
                    &format!("coalitions_{i}.csv"),
                    &coalitions_csv(&out, &queries),
                    &mut rec,
                )?;
            }
        }
    }
    for path in &args.score_dump {
        let start = Instant::now();
        let (f, tables) = read_dump(path)?;
        let score = mse_v(&f, &tables).map_err(run_failure)?;
        let secs = start.elapsed().as_secs_f64();
        let _ = writeln!(
            table,
            "\"dump:{}\",{},{}",
            path.display(),
            num(score),
            num(secs)
        );
    }
    write(&common.out, "mse_v.csv", &table, &mut rec)?;
    rec.finish(&common.out)
        .map_err(|e| Failure::io(&common.out, e))
}

pub fn simulate(args: &SimulateArgs) -> Outcome {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).map_err(Failure::config)?,
        None => ExperimentConfig::default(),
    };
    if !args.rho.is_empty() {
        cfg.rho = args.rho.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(b) = &args.bridge {
        cfg.bridge.command = Some(b.clone());
    }
    cfg.validate().map_err(Failure::config)?;

    let mut rec = Recorder::new("simulate", args.config.as_deref(), cfg.seed);
    prepare_out(&args.out)?;
    let session = SessionConfig {
        timeout: Duration::from_secs_f64(cfg.bridge.timeout_seconds.max(0.001)),
        ..SessionConfig::default()
    };
    let bridge = BridgeProvider::new(
        cfg.bridge.command.clone(),
        cfg.bridge.pool_size.max(1),
        session,
    );
    let result = run_experiment(&cfg, &bridge).map_err(run_failure)?;
    for (name, secs) in &result.stages {
        rec.record(name, *secs);
    }
    write_outputs(&result, &args.out).map_err(|e| Failure::io(&args.out, e))?;
    for f in [
        "summary.csv",
        "long.csv",
        "oracle.csv",
        "runtime.csv",
        "reports.json",
    ] {
        rec.output(f);
    }
    write(&args.out, "config.toml", &cfg.to_toml(), &mut rec)?;
    if let Some(c) = result.failures().next() {
        let failed = result.failures().count();
        rec.finish(&args.out)
            .map_err(|e| Failure::io(&args.out, e))?;
        let code = if c.error.as_deref().unwrap_or("").contains("bridge") {
            4
        } else {
            3
        };
        return Err(Failure::new(
            code,
            format!(
                "{failed} cell(s) failed; first: {} at rho={}: {}",
                c.estimator,
                c.rho,
                c.error.as_deref().unwrap_or("")
            ),
        ));
    }
    rec.finish(&args.out).map_err(|e| Failure::io(&args.out, e))
}
