//! Operator front end: `search`, `compare`, `inspect`, `convert` and `trainer`.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use augsearch::Policy;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit statuses shared by every subcommand.
pub mod exit {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const EVALUATOR: u8 = 3;
    pub const CHECKPOINT: u8 = 4;
}

#[derive(Debug, Parser)]
#[command(name = "augsearch", version, about = "Online augmentation-policy search")]
pub struct Cli {
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one search and write its log, report and checkpoints.
    Search(SearchArgs),
    /// Run several policies over several seeds and tabulate final losses.
    Compare(CompareArgs),
    /// Summarize a checkpoint, report or epoch log.
    Inspect(InspectArgs),
    /// Convert a volume between the native format and NIfTI-1.
    Convert(ConvertArgs),
    /// Serve the synthetic landscape over the line protocol.
    Trainer(TrainerArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunOverrides {
    /// TOML run document.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Spawn this trainer command (via `sh -c`) and talk to it over stdio.
    #[arg(long, conflicts_with = "trainer_addr")]
    pub trainer_cmd: Option<String>,
    /// Connect to a trainer listening on this TCP address.
    #[arg(long)]
    pub trainer_addr: Option<String>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    #[arg(long)]
    pub policy: Option<Policy>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "AUGSEARCH_OUT", default_value = "augsearch-out")]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier search.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    /// Comma-separated policies.
    #[arg(long, value_delimiter = ',', default_value = "ddaug,noda,fixed,uniform")]
    pub policy: Vec<Policy>,
    /// A count `N` (seeds 0..N), a range `A..B`, or a comma-separated list.
    #[arg(long, default_value = "10")]
    pub seeds: String,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Number of final epochs averaged per run.
    #[arg(long, default_value_t = 20)]
    pub tail: usize,
    /// Also write per-run results here.
    #[arg(long, env = "AUGSEARCH_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint, report or epoch log.
    pub path: PathBuf,
    /// Number of best paths to list.
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Input volume (`.avol`, `.nii`).
    pub input: PathBuf,
    /// Output volume (`.avol`, `.nii`).
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct TrainerArgs {
    /// Run document whose synthetic evaluator is served.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed used to derive the noise seed when the document has none.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Listen on this TCP address instead of using stdio.
    #[arg(long)]
    pub listen: Option<String>,
}

/// Parses `args` and runs the chosen subcommand.
pub fn run_cli<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG } else { exit::OK });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
