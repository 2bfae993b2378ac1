//! `wm3`: generate synthetic data, train, forecast, score and benchmark.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "wm3", version, about = "Latent-rollout weather model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic truth dataset and perturbed analyses of it.
    GenData(GenDataArgs),
    /// Run one training stage and write a model directory.
    Train(TrainArgs),
    /// Forecast from initial conditions in a dataset file.
    Forecast(ForecastArgs),
    /// Latitude-weighted RMSE and blur score per variable and lead time.
    Evaluate(EvaluateArgs),
    /// Percent RMSE difference of forecast set A against B.
    Scorecard(ScorecardArgs),
    /// Rollout plus backward under the offload engine; prints CSV.
    BenchOffload(BenchArgs),
    /// Run the built-in invariant suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Preset name (desk, tiny, full) or model config TOML.
    #[arg(long, default_value = "desk")]
    pub spec: String,
    #[arg(long)]
    pub hours: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturbed analyses written next to the truth as `<stem>.src-a.<ext>`, ...
    #[arg(long, default_value_t = 0)]
    pub sources: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// First valid hour.
    #[arg(long, default_value_t = 0)]
    pub start: i64,
    /// Analysis error size in units of each field's spread.
    #[arg(long, default_value_t = 0.05)]
    pub source_noise: f64,
    /// Pure rigid eastward rotation of the initial fields.
    #[arg(long)]
    pub advection_only: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Preset name or model config TOML; ignored with --init-model.
    #[arg(long, default_value = "desk")]
    pub config: String,
    /// Truth dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// pretrain, anneal, 1h or operational.
    #[arg(long, default_value = "pretrain")]
    pub stage: String,
    #[arg(long)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a saved model directory.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Save `checkpoints/step-NNNNNN` every N steps; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Operational sources; defaults to every `<stem>.src-*` file found.
    #[arg(long = "source")]
    pub sources: Vec<String>,
    /// Learn the blend weights during operational fine-tuning.
    #[arg(long)]
    pub learnable_blend: bool,
    /// Offload rollout activations under this byte budget.
    #[arg(long)]
    pub offload_budget: Option<usize>,
}

#[derive(Args)]
pub struct ForecastArgs {
    /// Saved model directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset holding the initial conditions.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub dt: i64,
    #[arg(long)]
    pub out: PathBuf,
    /// Blend these analyses, read from `<init stem>.<name>.<ext>`.
    #[arg(long = "source")]
    pub sources: Vec<String>,
    /// Run the rollout through the offload engine.
    #[arg(long)]
    pub offload: bool,
    /// Offload arena budget in bytes.
    #[arg(long)]
    pub budget: Option<usize>,
    /// First initial hour; defaults to the first in the file.
    #[arg(long)]
    pub start: Option<i64>,
    /// Number of consecutive hourly initial times.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Forecast files, comma-separated, one per lead time.
    #[arg(long, value_delimiter = ',', required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long)]
    pub truth: PathBuf,
    /// Field names such as sfc0 or atm1_l2; all fields when omitted.
    #[arg(long, value_delimiter = ',')]
    pub vars: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub lead_times: Vec<i64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ScorecardArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub a: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub b: Vec<PathBuf>,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub lead_times: Vec<i64>,
    #[arg(long, value_delimiter = ',')]
    pub vars: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Processor steps per rollout; a comma list gives one row each.
    #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
    pub segments: Vec<usize>,
    /// Arena budget in bytes; unlimited when omitted.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub lookahead: usize,
    /// Simulated host transfer latency per fetch.
    #[arg(long, default_value_t = 0)]
    pub latency_us: u64,
    /// Preset name or model config TOML.
    #[arg(long, default_value = "desk")]
    pub config: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// memory or file.
    #[arg(long, default_value = "memory")]
    pub store: String,
    /// Also write the CSV here, with a manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Run only the named checks.
    #[arg(long)]
    pub only: Vec<String>,
    /// List the checks and exit.
    #[arg(long)]
    pub list: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Forecast(a) => commands::forecast(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Scorecard(a) => commands::scorecard(a),
        Command::BenchOffload(a) => commands::bench_offload(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let msg = e.to_string().replace('\n', " ");
            let msg = msg.strip_prefix(&format!("{category}: ")).unwrap_or(&msg);
            eprintln!("error[{category}]: {msg}");
            ExitCode::from(e.status())
        }
    }
}
