mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (git ",
    env!("HR_GIT_REV"),
    ", ",
    env!("HR_PROFILE"),
    ", ",
    env!("HR_TARGET"),
    ")"
);

/// Hormone series reconstruction: synthetic cohorts, multi-task GP fits,
/// measurement planning, DCNN training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "hormone-recon", version = VERSION)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment config (JSON). Missing fields take built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-individual work. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (CSV plus metadata JSON).
    Generate {
        /// Number of individuals.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one MGP per scheduled individual and export posteriors.
    FitMgp {
        #[arg(long)]
        data: PathBuf,
        /// full, blockwise or independent.
        #[arg(long, default_value = "blockwise")]
        blocks: String,
        /// Schedule file from `plan-ed`.
        #[arg(long)]
        schedule: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan measurement days: an ED template or random schedules.
    PlanEd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        budget: usize,
        /// ed or random.
        #[arg(long, default_value = "ed")]
        scheme: String,
        /// Block structure used by the refits inside ED.
        #[arg(long, default_value = "blockwise")]
        blocks: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the DCNN on posterior streams of fitted models.
    TrainDcnn {
        /// Output directory of `fit-mgp`.
        #[arg(long)]
        posteriors: PathBuf,
        /// Dataset CSV with the ground-truth series.
        #[arg(long)]
        targets: PathBuf,
        /// Seed of the train/validation/test split.
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every cell of an experiment config and write tables and curves.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-emit tables (and curves) from a results file.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
