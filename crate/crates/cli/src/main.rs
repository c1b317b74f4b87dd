use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod backend;
mod commands;
mod config;

/// Invalid invocation or configuration; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Parser)]
#[command(
    name = "nl2sql-po",
    version,
    about = "Optimize NL2SQL prompts by exemplar and instruction search"
)]
struct Cli {
    /// TOML file with defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus and its databases and print counts by difficulty.
    Ingest(DataArgs),
    /// Optimize a prompt and write artifacts.
    Optimize(OptimizeArgs),
    /// Score a saved prompt on a dataset.
    Eval(EvalArgs),
    /// Build the multi-variant benchmark.
    Augment(AugmentArgs),
    /// Render accuracy, cost and latency tables from run directories.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// BIRD-style JSON manifest.
    #[arg(long, visible_alias = "dataset", value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Directory holding `<db_id>/<db_id>.sqlite`.
    #[arg(long, value_name = "DIR")]
    pub db_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// live | replay | oracle:gold | oracle:coverage | oracle:kdep
    #[arg(long)]
    pub backend: Option<String>,
    /// Replay cache directory.
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// Record every completion into this cache directory.
    #[arg(long, value_name = "DIR")]
    pub record: Option<PathBuf>,
    /// Chat-completion endpoint URL for the live backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Generator model id.
    #[arg(long)]
    pub model: Option<String>,
    /// Proposer model id.
    #[arg(long)]
    pub proposer_model: Option<String>,
    /// Requests per minute admitted to the live backend.
    #[arg(long)]
    pub rpm: Option<u32>,
    /// Evaluation worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Per-statement SQL timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// res | ores | joint | ipo
    #[arg(long)]
    pub method: Option<String>,
    /// SMBO trials (ORES, joint).
    #[arg(long)]
    pub trials: Option<usize>,
    /// Proposer iterations (IPO).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// acc | acc+lat
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub latency_weight: Option<f64>,
    /// Seconds at which the latency penalty saturates.
    #[arg(long)]
    pub latency_normalizer: Option<f64>,
    /// Exemplar count for RES.
    #[arg(long)]
    pub k: Option<usize>,
    /// Upper bound of the ORES exemplar count.
    #[arg(long)]
    pub k_max: Option<usize>,
    /// RES restarts.
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub valid_fraction: Option<f64>,
    /// Validation items sampled per IPO iteration.
    #[arg(long)]
    pub valid_sample: Option<usize>,
    /// Minimum exemplars the proposer must return.
    #[arg(long)]
    pub min_exemplars: Option<usize>,
    /// Instruction/exemplar pairs bootstrapped by the joint optimizer.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Artifacts directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// `prompt.json` or a run directory containing one.
    #[arg(long, value_name = "PATH")]
    pub prompt: PathBuf,
    /// Also measure latency of correct predictions and of the gold queries.
    #[arg(long)]
    pub latency: bool,
    #[arg(long, default_value_t = 1)]
    pub warmups: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Directory for the report JSONs.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Variants requested per question.
    #[arg(long, default_value_t = 2)]
    pub variants: usize,
    #[arg(long, default_value_t = 1)]
    pub warmups: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Output directory; an existing progress file resumes the run.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories written by `optimize` or `eval --out`.
    #[arg(long, num_args = 1.., required = true, value_name = "DIR")]
    pub runs: Vec<PathBuf>,
    /// Write the tables as JSON and Markdown here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<UsageError>() || e.is::<nl2sql_po::dataset::DatasetError>() || e.is::<clap::Error>()
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let file = match &cli.config {
        Some(path) => config::FileConfig::load(path),
        None => Ok(config::FileConfig::default()),
    };
    let result = file.and_then(|file| match cli.command {
        Command::Ingest(args) => commands::ingest(&file, &args),
        Command::Optimize(args) => commands::optimize(&file, &args),
        Command::Eval(args) => commands::eval(&file, &args),
        Command::Augment(args) => commands::augment(&file, &args),
        Command::Report(args) => commands::report(&args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", render_error(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

/// Joins the error chain, skipping causes a parent message already quotes.
fn render_error(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let part = cause.to_string();
        if text.contains(&part) {
            continue;
        }
        if !text.is_empty() {
            text.push_str(": ");
        }
        text.push_str(&part);
    }
    text
}
