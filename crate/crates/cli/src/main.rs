use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

mod commands;
mod manifest;
mod svg;

/// Invalid invocation; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "interopt", version, about = "Emulate, explain and optimize operational parameters")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random draw; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON configuration file for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset scored by a random analytic cost function.
    Synth(SynthArgs),
    /// Train the emulator on a scored dataset.
    Train(DataArgs),
    /// Leave-one-out cross validation of the emulator.
    Cv(DataArgs),
    /// Shapley attributions of every record.
    Explain(ExplainArgs),
    /// Optimize the adjustable features of one well or all of them.
    Optimize(OptimizeArgs),
    /// Distribution table and figures from a campaign report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Schema JSON; the built-in shale-gas schema when omitted.
    #[arg(long)]
    pub schema: Option<PathBuf>,

    /// Number of wells to generate.
    #[arg(long)]
    pub count: usize,

    /// Standard deviation of the Gaussian noise added to the target.
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset CSV with an `id` column and every schema column.
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("mode").args(["exact", "sampled"])))]
pub struct ExplainArgs {
    /// Model artifact written by `train`.
    #[arg(long)]
    pub model: PathBuf,

    #[arg(long)]
    pub data: PathBuf,

    #[arg(long)]
    pub schema: Option<PathBuf>,

    /// Enumerate every coalition (the default up to 16 features).
    #[arg(long)]
    pub exact: bool,

    /// Estimate from this many random permutations.
    #[arg(long, value_name = "N")]
    pub sampled: Option<usize>,

    /// Maximum background rows drawn from the dataset.
    #[arg(long, default_value_t = interopt::shapley::DEFAULT_BACKGROUND_CAP)]
    pub background: usize,

    /// Report attributions in target units instead of normalized units.
    #[arg(long)]
    pub physical: bool,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("wells").args(["well", "all"]).required(true)))]
#[command(group(ArgGroup::new("mode").args(["exact", "sampled"])))]
pub struct OptimizeArgs {
    #[arg(long)]
    pub model: PathBuf,

    #[arg(long)]
    pub data: PathBuf,

    #[arg(long)]
    pub schema: Option<PathBuf>,

    /// Optimize only the well with this id.
    #[arg(long, value_name = "ID")]
    pub well: Option<String>,

    /// Optimize every well in the dataset.
    #[arg(long)]
    pub all: bool,

    /// Also run the four block/step toggle combinations.
    #[arg(long)]
    pub ablation: bool,

    #[arg(long)]
    pub exact: bool,

    #[arg(long, value_name = "N")]
    pub sampled: Option<usize>,

    #[arg(long, default_value_t = interopt::shapley::DEFAULT_BACKGROUND_CAP)]
    pub background: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `campaign.json` written by `optimize`.
    #[arg(long)]
    pub campaign: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
