use std::path::Path;
use std::time::Instant;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

/// Version of the output file layouts described by the manifest.
pub const OUTPUT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<String>,
    pub seed: u64,
    pub software_version: String,
    pub output_schema_version: u32,
    pub started: String,
    pub finished: String,
    pub stages: Vec<Stage>,
    pub outputs: Vec<String>,
}

/// Collects stage timings while a command runs.
pub struct Recorder {
    command: String,
    config_path: Option<String>,
    seed: u64,
    started: DateTime<Utc>,
    stages: Vec<Stage>,
    outputs: Vec<String>,
}

impl Recorder {
    pub fn new(command: &str, config_path: Option<&Path>, seed: u64) -> Self {
        Recorder {
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            seed,
            started: Utc::now(),
            stages: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(name, start.elapsed().as_secs_f64());
        out
    }

    pub fn record(&mut self, name: &str, seconds: f64) {
        self.stages.push(Stage {
            name: name.to_string(),
            seconds,
        });
    }

    pub fn output(&mut self, file: &str) {
        self.outputs.push(file.to_string());
    }

    pub fn finish(self, out: &Path) -> std::io::Result<()> {
        let stamp = |t: DateTime<Utc>| t.to_rfc3339_opts(SecondsFormat::Millis, true);
        let mut outputs = self.outputs;
        outputs.push(MANIFEST_FILE.to_string());
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            config_path: self.config_path,
            seed: self.seed,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            output_schema_version: OUTPUT_SCHEMA_VERSION,
            started: stamp(self.started),
            finished: stamp(Utc::now()),
            stages: self.stages,
            outputs,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(out.join(MANIFEST_FILE), json + "\n")
    }
}
