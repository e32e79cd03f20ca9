use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod manifest;

use config::{ConfigFile, UsageError};

/// Explanation-augmented reranker pipeline: sample training pairs, generate
/// explanations with an LLM, export fine-tuning data, rerank with a scorer
/// service and evaluate nDCG@k.
#[derive(Parser, Debug)]
#[command(name = "exaranker", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Sampling seed (default 42).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for the persistent LLM response cache.
    #[arg(long, global = true, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,

    /// Base URL of the chat-completions or scorer service.
    #[arg(long, global = true, value_name = "URL")]
    pub base_url: Option<String>,

    /// Name of the environment variable holding the API key.
    #[arg(long, global = true, value_name = "VAR")]
    pub api_key_env: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample balanced (query, passage, label) pairs.
    Sample(commands::sample::SampleArgs),
    /// Generate explanations for sampled pairs with an LLM.
    Augment(commands::augment::AugmentArgs),
    /// Write fine-tuning records with or without explanations.
    Export(commands::export::ExportArgs),
    /// Rerank a candidate run with a scorer service.
    Rerank(commands::rerank::RerankArgs),
    /// Compute nDCG@k of a run against qrels.
    Eval(commands::eval::EvalArgs),
    /// Build comparison tables, curves and improvement deltas.
    Report(commands::report::ReportArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.global.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Sample(args) => commands::sample::run(args, &cli.global, &config),
        Command::Augment(args) => commands::augment::run(args, &cli.global, &config),
        Command::Export(args) => commands::export::run(args, &config),
        Command::Rerank(args) => commands::rerank::run(args, &cli.global, &config),
        Command::Eval(args) => commands::eval::run(args, &config),
        Command::Report(args) => commands::report::run(args, &config),
    }
}

/// Output piped into `head` and friends closes early; that is not a failure.
fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain()
        .filter_map(|e| e.downcast_ref::<std::io::Error>())
        .any(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if is_broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
