//! `drum`: command-line front end for the personalized conditioning engine.
//!
//! Machine output goes to files (and `inspect` to stdout); progress goes to
//! stderr. Exit codes: 0 on success, 1 on a domain error (its category is
//! printed), 2 on a usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "drum", version, about = "Personalized conditioning engine")]
pub struct Cli {
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Seed for every random draw of the run.
    #[arg(long, global = true, env = "DRUM_SEED")]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus.
    GenSynthetic(GenArgs),
    /// Print corpus dimensions.
    Inspect(InspectArgs),
    /// Build a user profile with the coreset sampler.
    Sample(SampleArgs),
    /// Train the adapter on reconstruction.
    Train(TrainArgs),
    /// Personalize one target prompt against a profile.
    Personalize(PersonalizeArgs),
    /// Evaluate Text align over every user of a corpus.
    Evaluate(EvaluateArgs),
    /// Run a sampling, alpha or ablation sweep.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synthetic spec; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub history: Option<usize>,
    #[arg(long)]
    pub d_sim: Option<usize>,
    #[arg(long)]
    pub d_cond: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub archetypes: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0.10)]
    pub ratio: f64,
    /// Size of the random subset approximating mean similarity (default: all).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub no_preferences: bool,
    /// Restrict sampling to one user's history.
    #[arg(long)]
    pub user: Option<String>,
    /// Output profile JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON with optional `adapter` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from an existing checkpoint instead of a fresh init.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub grad_check: bool,
}

#[derive(Debug, Args)]
pub struct PersonalizeArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub target_id: String,
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    /// Fuse all conditions in one softmax instead of guided weighting.
    #[arg(long)]
    pub no_guidance: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Coreset,
    Random,
    Uniform,
    Full,
}

#[derive(Debug, Args)]
pub struct EvalFlags {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON evaluation config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub no_preferences: bool,
    /// Score history against only the most recent N entries.
    #[arg(long)]
    pub history_recent: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: EvalFlags,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub no_guidance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Sampling,
    Alpha,
    Ablation,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    #[command(flatten)]
    pub common: EvalFlags,
    /// Sampling ratios for the sampling sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2, 0.4, 1.0])]
    pub ratios: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Method::Coreset, Method::Random, Method::Uniform])]
    pub methods: Vec<Method>,
    /// Personalization degrees for the alpha sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])]
    pub alphas: Vec<f64>,
    /// Target for the alpha sweep (default: the first target in the corpus).
    #[arg(long)]
    pub target_id: Option<String>,
    /// References for the alpha sweep (default: coreset of the target's user).
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Also write an SVG line chart.
    #[arg(long)]
    pub plot: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error[usage]: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[usage]: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(1)
        }
    }
}
