mod commands;
mod input;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kernelsim::cluster::{DEFAULT_MAX_ITER, DEFAULT_N_INIT, DEFAULT_SEED};
use kernelsim::preprocess::DEFAULT_LOG_THRESHOLD;
use kernelsim::stability::{RelBase, DEFAULT_THRESHOLD_PCT};

/// Performance similarity of computational kernels from hardware metrics.
#[derive(Debug, Parser)]
#[command(name = "kst", version, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster kernels and write partition, quality, model, box statistics
    /// and a 2D projection.
    Cluster(ClusterArgs),
    /// Score a range of cluster counts with several validity criteria.
    SelectK(SelectKArgs),
    /// Nearest kernels and family-vs-outside similarity for one target.
    Similar(SimilarArgs),
    /// Smallest problem size from which each kernel's metrics are stable.
    Stability(StabilityArgs),
    /// Parse and validate inputs, then print a summary.
    IngestCheck(IngestArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlatformArg {
    Cpu,
    Gpu,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogPolicyArg {
    Auto,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ward,
    Kmeans,
}

#[derive(Debug, Clone, Args)]
pub struct SourceArgs {
    /// Raw sample file(s): CSV or JSON, chosen by extension unless --format is given.
    #[arg(long, short, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Prebuilt raw metric table (CSV with a `row` label column) instead of samples.
    #[arg(long, conflicts_with = "input")]
    pub table: Option<PathBuf>,
    /// Platform(s) to analyse; defaults to every platform present in the input.
    #[arg(long, value_enum)]
    pub platform: Option<PlatformArg>,
    /// Problem size in bytes, `largest`, or `all` (one row per size variant).
    #[arg(long, default_value = "largest")]
    pub size: String,
    /// Comma-separated metric names; defaults to the platform's standard set.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct PrepArgs {
    #[arg(long, value_enum, default_value = "auto")]
    pub log_policy: LogPolicyArg,
    /// Max/min span above which the auto policy logs a column.
    #[arg(long, default_value_t = DEFAULT_LOG_THRESHOLD)]
    pub log_threshold: f64,
    /// Log exactly these metrics (overrides --log-policy).
    #[arg(long, value_delimiter = ',')]
    pub log_metrics: Vec<String>,
    /// Use the raw values as they are.
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Seed for every random choice.
    #[arg(long, env = "KST_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, default_value = "kst-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct KMeansArgs {
    #[arg(long, default_value_t = DEFAULT_N_INIT)]
    pub n_init: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub prep: PrepArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value = "ward")]
    pub method: MethodArg,
    #[arg(long, short, default_value_t = 2)]
    pub k: usize,
    #[command(flatten)]
    pub kmeans: KMeansArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SelectKArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub prep: PrepArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value = "ward")]
    pub method: MethodArg,
    /// Inclusive range such as `2..10`; a single number selects one k.
    /// Defaults to 2 up to min(10, rows - 1).
    #[arg(long)]
    pub k_range: Option<String>,
    /// silhouette, gap, calinski_harabasz (ch), dunn, davies_bouldin (db), bic.
    #[arg(long, value_delimiter = ',', default_value = "silhouette,gap,calinski_harabasz,dunn")]
    pub criteria: Vec<String>,
    /// Uniform reference datasets per k for the gap statistic.
    #[arg(long, default_value_t = 50)]
    pub gap_refs: usize,
    #[command(flatten)]
    pub kmeans: KMeansArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimilarArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub prep: PrepArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Precomputed square distance matrix CSV; skips ingest and standardization.
    #[arg(long, conflicts_with_all = ["input", "table"])]
    pub distances: Option<PathBuf>,
    #[arg(long)]
    pub target: String,
    /// Glob patterns (`*`, `?`) naming the kernel family, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub family: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub neighbors: usize,
}

#[derive(Debug, Clone, Args)]
pub struct StabilityArgs {
    #[arg(long, short, num_args = 1.., required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long, value_enum)]
    pub platform: Option<PlatformArg>,
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_PCT)]
    pub threshold_pct: f64,
    #[arg(long, value_parser = clap::value_parser!(RelBase), default_value = "larger")]
    pub rel_base: RelBase,
    /// Reference line for the summary, `NAME=VALUE` (e.g. a cache size), repeatable.
    #[arg(long)]
    pub annotate: Vec<String>,
    #[arg(long, default_value = "kst-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[arg(long, short, num_args = 1.., required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Also write the summary to DIR/ingest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(#[from] kernelsim::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) | CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input",
            CliError::Usage(_) => "usage",
            CliError::Internal(_) => "internal",
        }
    }
}

fn report_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|info| {
        report_error("internal", &info.to_string());
    }));

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", e.render().to_string().trim());
            return ExitCode::from(2);
        }
    };

    let result = match cli.command {
        Command::Cluster(a) => commands::cluster(a),
        Command::SelectK(a) => commands::select_k(a),
        Command::Similar(a) => commands::similar(a),
        Command::Stability(a) => commands::stability(a),
        Command::IngestCheck(a) => commands::ingest_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::from(e.code())
        }
    }
}
