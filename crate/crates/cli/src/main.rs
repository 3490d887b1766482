//! `aoe`: build merged Mixture-of-Experts checkpoints and the diagnostics used
//! to choose merge parameters.
//!
//! Exit codes: 0 on success, 1 on operational errors (I/O, corrupt files),
//! 2 on invalid or incompatible inputs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use aoe_core::analysis::Aggregate;
use aoe_core::parallel::DEFAULT_MAX_RESIDENT_BYTES;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status for invalid or incompatible inputs.
pub const EXIT_VALIDATION: u8 = 2;
/// Exit status for operational failures.
pub const EXIT_FAILURE: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "aoe", version, about = "Assemble merged MoE checkpoints from parent models")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Upper bound on tensor bytes held in memory at once.
    #[arg(long, global = true, default_value_t = DEFAULT_MAX_RESIDENT_BYTES)]
    pub max_resident_bytes: u64,
    /// Naming scheme file used when a recipe does not name one.
    #[arg(long, global = true, env = "AOE_SCHEME")]
    pub scheme: Option<PathBuf>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-tensor normalized differences between a base model and others.
    Diff(DiffArgs),
    /// Resolve a recipe into a per-tensor plan without writing tensors.
    Plan(PlanArgs),
    /// Execute a recipe or a saved plan.
    Merge(MergeArgs),
    /// Count tensors that would be merged at each threshold.
    Sweep(SweepArgs),
    /// Heatmap or histogram CSV from a diff cache.
    Report(ReportArgs),
    /// Fraction of transcript responses containing the closing think tag.
    ThinkFreq(ThinkFreqArgs),
    /// Check checkpoint structure, and mutual compatibility when several are given.
    Validate(ValidateArgs),
    /// Generate a synthetic base and variant checkpoint from a fixture spec.
    Fixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    /// Base model first, then the models to compare against it.
    #[arg(required = true, num_args = 2..)]
    pub models: Vec<PathBuf>,
    /// Where to write the diff cache.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Print the summary as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Replace the recipe's threshold.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Replace the recipe's weights (comma separated, one per model).
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    /// Diff cache to reuse when it matches the models, or to create.
    #[arg(long)]
    pub diffs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    pub recipe: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Where to write the plan.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Print the plan JSON to stdout instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Recipe file (omit when using --plan).
    #[arg(required_unless_present = "plan", conflicts_with = "plan")]
    pub recipe: Option<PathBuf>,
    /// A plan written by `aoe plan`.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Where to write the report (default: OUT/merge_report.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Replace existing checkpoint files in the output directory.
    #[arg(long)]
    pub force: bool,
    /// Plan and print the report skeleton; write nothing.
    #[arg(long)]
    pub dry_run: bool,
    /// Print the report JSON to stdout.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub recipe: PathBuf,
    /// Thresholds to evaluate (comma separated).
    #[arg(long, required = true, value_delimiter = ',')]
    pub deltas: Vec<f64>,
    #[arg(long)]
    pub diffs: Option<PathBuf>,
    /// CSV destination (default: stdout).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReportKind {
    Heatmap,
    Histogram,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Diff cache written by `aoe diff` or `--diffs`.
    pub cache: PathBuf,
    #[arg(value_enum)]
    pub kind: ReportKind,
    /// Heatmap reduction over experts: mean, max or per-expert (no reduction).
    #[arg(long, default_value_t = Aggregate::Mean)]
    pub aggregate: Aggregate,
    /// Histogram bin edges (comma separated, strictly increasing).
    #[arg(long, value_delimiter = ',', conflicts_with = "log_bins")]
    pub edges: Option<Vec<f64>>,
    /// Log-spaced histogram bins as LO,HI,COUNT.
    #[arg(long, value_delimiter = ',')]
    pub log_bins: Option<Vec<f64>>,
    /// Histogram cutoff: smaller differences are excluded.
    #[arg(long, default_value_t = aoe_core::analysis::DEFAULT_CUTOFF)]
    pub cutoff: f64,
    /// CSV destination (default: stdout).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ThinkFreqArgs {
    /// Newline-delimited JSON, one {"id", "response"} object per line.
    pub transcript: PathBuf,
    #[arg(long, default_value = aoe_core::analysis::DEFAULT_OPEN_TAG)]
    pub open_tag: String,
    #[arg(long, default_value = aoe_core::analysis::DEFAULT_CLOSE_TAG)]
    pub close_tag: String,
    /// Also write the stats JSON here.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    /// Fixture spec (TOML or JSON by extension).
    pub spec: PathBuf,
    /// Output directory; receives `base/` and `variant/`.
    #[arg(long, short)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            let validation = err
                .chain()
                .filter_map(|e| e.downcast_ref::<aoe_core::Error>())
                .any(aoe_core::Error::is_validation);
            ExitCode::from(if validation { EXIT_VALIDATION } else { EXIT_FAILURE })
        }
    }
}
