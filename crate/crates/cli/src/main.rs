mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use condshap::methods::SPEC_HELP;

#[derive(Parser)]
#[command(
    name = "condshap",
    version,
    about = "Conditional Shapley values by exact coalition enumeration"
)]
#[command(after_help = SPEC_HELP)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explain instances of a CSV file with one estimator.
    #[command(after_help = SPEC_HELP)]
    Explain(ExplainArgs),
    /// Run a Gaussian simulation experiment from a TOML config.
    Simulate(SimulateArgs),
    /// Score estimators by MSE_v on real data.
    #[command(after_help = SPEC_HELP)]
    Evaluate(EvaluateArgs),
    /// Serve the built-in reference regressors over the bridge protocol.
    #[command(hide = true)]
    RefSidecar {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// Training data (CSV with header).
    #[arg(long)]
    pub data: PathBuf,
    /// Target column in the training data, used by `fit:` models.
    #[arg(long)]
    pub target: Option<String>,
    /// Columns to expand into indicators.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Sidecar command for `bridge:` regressors (overrides CONDSHAP_BRIDGE_CMD).
    #[arg(long)]
    pub bridge: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub bridge_pool: usize,
    #[arg(long, default_value_t = 30.0)]
    pub bridge_timeout: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: DataArgs,
    /// Instances to explain (CSV with the same feature columns).
    #[arg(long)]
    pub instances: PathBuf,
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub estimator: String,
    /// Also write every v̂(S) to coalitions.csv.
    #[arg(long)]
    pub dump_coalitions: bool,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict the correlation grid.
    #[arg(long, value_delimiter = ',')]
    pub rho: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bridge: Option<String>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: DataArgs,
    /// Instances to score; defaults to the training rows.
    #[arg(long)]
    pub instances: Option<PathBuf>,
    #[arg(long, required_unless_present = "score_dump")]
    pub model: Option<String>,
    #[arg(long = "estimator")]
    pub estimators: Vec<String>,
    /// Score a coalitions.csv written by an earlier run.
    #[arg(long = "score-dump")]
    pub score_dump: Vec<PathBuf>,
    /// Write coalitions_<i>.csv per estimator.
    #[arg(long)]
    pub dump_coalitions: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match cli.command {
        Command::Explain(a) => commands::explain(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::RefSidecar { args } => condshap::bridge::reference::run_from_args(args)
            .map_err(|e| commands::Failure::new(4, format!("sidecar: {e}"))),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
