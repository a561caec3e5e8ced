use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_condshap");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("CONDSHAP_BRIDGE_CMD")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Deterministic pseudo-random table with a header `x1..xm[,y]`.
fn write_table(path: &Path, n: usize, m: usize, target: bool, seed: u64) {
    let mut s: String = (1..=m)
        .map(|j| format!("x{j}"))
        .collect::<Vec<_>>()
        .join(",");
    if target {
        s.push_str(",y");
    }
    s.push('\n');
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
    };
    for _ in 0..n {
        let row: Vec<f64> = (0..m).map(|_| next()).collect();
        let y = 1.0
            + row
                .iter()
                .enumerate()
                .map(|(j, v)| (j as f64 + 1.0) * 0.3 * v)
                .sum::<f64>()
            + 0.1 * next();
        let mut line = row
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        if target {
            let _ = write!(line, ",{y}");
        }
        s.push_str(&line);
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(n: usize, m: usize, n_inst: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_table(&dir.path().join("train.csv"), n, m, true, 1);
        write_table(&dir.path().join("inst.csv"), n_inst, m, true, 2);
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn only_one_manifest(dir: &Path) {
    let count = fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == "manifest.json")
        .count();
    assert_eq!(count, 1);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    for key in [
        "command",
        "seed",
        "software_version",
        "started",
        "finished",
        "stages",
        "output_schema_version",
    ] {
        assert!(manifest.get(key).is_some(), "manifest lacks {key}");
    }
}

#[test]
fn explain_two_feature_toy_with_separate_ols() {
    let fx = Fixture::new(200, 2, 5);
    let out = fx.path("out");
    let o = run(&[
        "explain",
        "--data",
        p(&fx.path("train.csv")),
        "--target",
        "y",
        "--instances",
        p(&fx.path("inst.csv")),
        "--model",
        "fit:ols",
        "--estimator",
        "separate:ols",
        "--out",
        p(&out),
        "--dump-coalitions",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("explanations.csv"));
    assert_eq!(
        rows[0],
        [
            "instance_id",
            "phi0",
            "phi_1",
            "phi_2",
            "efficiency_residual"
        ]
    );
    assert_eq!(rows.len(), 6);
    for r in &rows[1..] {
        let resid: f64 = r[4].parse().unwrap();
        assert!(resid.abs() < 1e-10);
    }
    let dump = csv_rows(&out.join("coalitions.csv"));
    assert_eq!(dump.len() - 1, 5 * 4);
    only_one_manifest(&out);
}

#[test]
fn explain_seven_features_enumerates_128_coalitions() {
    let fx = Fixture::new(150, 7, 2);
    let out = fx.path("out");
    let o = run(&[
        "explain",
        "--data",
        p(&fx.path("train.csv")),
        "--target",
        "y",
        "--instances",
        p(&fx.path("inst.csv")),
        "--model",
        "fit:ols",
        "--estimator",
        "gaussian-mc:K=50",
        "--out",
        p(&out),
        "--dump-coalitions",
        "--jobs",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dump = csv_rows(&out.join("coalitions.csv"));
    let first = dump[1..].iter().filter(|r| r[0] == dump[1][0]).count();
    assert_eq!(first, 128);
}

#[test]
fn missing_model_is_a_usage_error() {
    let fx = Fixture::new(20, 2, 2);
    let o = run(&[
        "explain",
        "--data",
        p(&fx.path("train.csv")),
        "--instances",
        p(&fx.path("inst.csv")),
        "--estimator",
        "independence",
        "--out",
        p(&fx.path("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--model") && err.contains("Usage"), "{err}");
    assert!(!fx.path("out").exists());
}

#[test]
fn bad_spec_exits_2_and_estimator_failure_exits_3() {
    let fx = Fixture::new(20, 2, 2);
    let base = |est: &str, out: &str| {
        run(&[
            "explain",
            "--data",
            p(&fx.path("train.csv")),
            "--target",
            "y",
            "--instances",
            p(&fx.path("inst.csv")),
            "--model",
            "linear:0,1,2",
            "--estimator",
            est,
            "--out",
            p(&fx.path(out)),
        ])
    };
    assert_eq!(base("separate:wizard", "a").status.code(), Some(2));
    let o = base("separate:knn:k=50", "b");
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("coalition"));
}

#[test]
fn unreachable_sidecar_exits_4() {
    let fx = Fixture::new(20, 2, 2);
    let o = run(&[
        "explain",
        "--data",
        p(&fx.path("train.csv")),
        "--target",
        "y",
        "--instances",
        p(&fx.path("inst.csv")),
        "--model",
        "linear:0,1,2",
        "--estimator",
        "separate:bridge:ols-ref",
        "--bridge",
        "/nonexistent/sidecar",
        "--out",
        p(&fx.path("out")),
    ]);
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn bridge_estimator_through_the_hidden_reference_sidecar() {
    let fx = Fixture::new(100, 3, 3);
    let sidecar = format!("{BIN} ref-sidecar");
    let explain = |est: &str, out: &str| {
        let o = run(&[
            "explain",
            "--data",
            p(&fx.path("train.csv")),
            "--target",
            "y",
            "--instances",
            p(&fx.path("inst.csv")),
            "--model",
            "linear:0.5,1,-2,0.25",
            "--estimator",
            est,
            "--bridge",
            &sidecar,
            "--out",
            p(&fx.path(out)),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        csv_rows(&fx.path(out).join("explanations.csv"))
    };
    let remote = explain("separate:bridge:ols-ref", "remote");
    let local = explain("separate:ols", "local");
    for (a, b) in remote[1..].iter().zip(&local[1..]) {
        for (x, y) in a[1..4].iter().zip(&b[1..4]) {
            let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
            assert!((x - y).abs() < 1e-6);
        }
    }
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("sim.toml");
    fs::write(
        &path,
        "seed = 3\nn_train = 200\nn_test = 5\n\n[oracle]\nsamples = 10000\nmax_doublings = 0\n",
    )
    .unwrap();
    path
}

#[test]
fn simulate_default_grid_and_rho_filter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let all = dir.path().join("all");
    let o = run(&["simulate", "--config", p(&cfg), "--out", p(&all)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&all.join("summary.csv")).len() - 1, 3 * 4);
    only_one_manifest(&all);

    let one = dir.path().join("one");
    let o = run(&[
        "simulate",
        "--config",
        p(&cfg),
        "--out",
        p(&one),
        "--rho",
        "0.9",
    ]);
    assert!(o.status.success());
    let rows = csv_rows(&one.join("summary.csv"));
    assert_eq!(rows.len() - 1, 3);
    assert!(rows[1..].iter().all(|r| r[1] == "0.9"));

    let again = dir.path().join("again");
    run(&[
        "simulate",
        "--config",
        p(&cfg),
        "--out",
        p(&again),
        "--rho",
        "0.9",
    ]);
    for f in ["summary.csv", "long.csv", "oracle.csv"] {
        assert_eq!(
            fs::read(one.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
    // Nothing is written next to the output directories.
    let mut entries: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    entries.sort();
    assert_eq!(entries, ["again", "all", "one", "sim.toml"]);
}

#[test]
fn simulate_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seeed = 3\n").unwrap();
    let o = run(&[
        "simulate",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

fn mse_rows(dir: &Path) -> Vec<(String, f64)> {
    csv_rows(&dir.join("mse_v.csv"))[1..]
        .iter()
        .map(|r| (r[0].trim_matches('"').to_string(), r[1].parse().unwrap()))
        .collect()
}

#[test]
fn evaluate_scores_and_rescores_dumps() {
    let fx = Fixture::new(150, 3, 10);
    let out = fx.path("eval");
    let o = run(&[
        "evaluate",
        "--data",
        p(&fx.path("train.csv")),
        "--target",
        "y",
        "--instances",
        p(&fx.path("inst.csv")),
        "--model",
        "fit:ridge-basis",
        "--estimator",
        "separate:ols",
        "--estimator",
        "mean",
        "--out",
        p(&out),
        "--dump-coalitions",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let scores = mse_rows(&out);
    assert_eq!(scores.len(), 2);
    assert!(scores[1].1 > scores[0].1, "{scores:?}");
    let header = &csv_rows(&out.join("mse_v.csv"))[0];
    assert_eq!(header, &["estimator", "mse_v", "time_seconds"]);

    let re = fx.path("rescore");
    let o = run(&[
        "evaluate",
        "--data",
        p(&fx.path("train.csv")),
        "--score-dump",
        p(&out.join("coalitions_0.csv")),
        "--out",
        p(&re),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(mse_rows(&re)[0].1.to_bits(), scores[0].1.to_bits());
    only_one_manifest(&re);
}

#[test]
fn evaluate_eleven_features_enumerates_2046_coalitions() {
    let fx = Fixture::new(120, 11, 1);
    let out = fx.path("eval");
    let o = run(&[
        "evaluate",
        "--data",
        p(&fx.path("train.csv")),
        "--target",
        "y",
        "--instances",
        p(&fx.path("inst.csv")),
        "--model",
        "fit:ols",
        "--estimator",
        "independence:K=20",
        "--out",
        p(&out),
        "--dump-coalitions",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dump = csv_rows(&out.join("coalitions_0.csv"));
    let nontrivial = dump[1..]
        .iter()
        .filter(|r| r[1] != "0" && r[1] != "2047")
        .count();
    assert_eq!(nontrivial, 2046);
}
