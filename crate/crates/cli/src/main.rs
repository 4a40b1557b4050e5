//! `normforge` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use normforge::config::BackendKind;
use normforge::rag::NormMode;

#[derive(Debug, Parser)]
#[command(
    name = "normforge",
    version,
    about = "Build and query frame-grounded sociocultural norm bases"
)]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Chat backend: scripted or remote.
    #[arg(long, global = true)]
    pub backend: Option<BackendKind>,
    /// Reply script for the scripted backend.
    #[arg(long, global = true, value_name = "FILE")]
    pub script: Option<PathBuf>,
    /// Directory of prompt templates overriding the built-in ones.
    #[arg(long, global = true, value_name = "DIR")]
    pub templates: Option<PathBuf>,
    /// Master seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on concurrent backend requests.
    #[arg(long, global = true)]
    pub max_in_flight: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic dialogues from frames.
    Generate(GenerateArgs),
    /// Extract, verify and deduplicate norms into a norm base.
    Build(BuildArgs),
    /// Predict social factors with retrieved norms.
    Predict(PredictArgs),
    /// Compute evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Summarize a norm base.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["frames", "sweep"]))]
pub struct GenerateArgs {
    /// JSONL file with one frame object per line.
    pub frames: Option<PathBuf>,
    /// Sample this many distinct frames from the frame space instead.
    #[arg(long)]
    pub sweep: Option<usize>,
    /// Utterances requested per dialogue.
    #[arg(long, default_value_t = 6)]
    pub turns: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub dialogues: PathBuf,
    #[arg(long)]
    pub out_base: PathBuf,
    #[arg(long)]
    pub passes: Option<usize>,
    #[arg(long)]
    pub cap_multiplier: Option<usize>,
    /// Skip the verification stage.
    #[arg(long)]
    pub no_verify: bool,
    /// Pool similarity threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also write the build report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("factors").required(true).args(["factor", "all_factors"]))]
pub struct PredictArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub dialogues: PathBuf,
    #[arg(long)]
    pub factor: Option<String>,
    #[arg(long)]
    pub all_factors: bool,
    #[arg(long)]
    pub norm_mode: Option<NormMode>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Soft overlap between two norm files (the first is the reference).
    Overlap {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.97)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean Likert score per criterion.
    Likert {
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Macro precision, recall and F1 from a prediction file.
    Macro {
        predictions: PathBuf,
        /// Restrict to one factor.
        #[arg(long)]
        factor: Option<String>,
        /// Comma-separated class set; defaults to the gold and valid
        /// predicted labels seen per factor.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of norms over one factor's labels.
    Distribution {
        norms: PathBuf,
        #[arg(long)]
        factor: String,
        /// Also classify norms that failed verification.
        #[arg(long)]
        include_rejected: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub base: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
