use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use dpua_core::TaskKind;

/// Train and evaluate uncertainty-aware subjectivity classifiers.
///
/// Exit codes: 0 success, 2 input or config error, 3 training failure,
/// 4 judge service unavailable.
#[derive(Debug, Parser)]
#[command(name = "dpua", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus (or synthesize one) and print its statistics.
    Prepare(PrepareArgs),
    /// Phase 1: disagreement-perception training into a new run directory.
    TrainDp(TrainDpArgs),
    /// Phase 2: uncertainty alignment starting from a Phase-1 checkpoint.
    TrainUa(TrainUaArgs),
    /// Score a checkpoint on a dataset's test split and write a report.
    Eval(EvalArgs),
    /// Collect evaluation reports into summary tables.
    Report(ReportArgs),
}

pub fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = TaskKind::ALL.iter().map(|t| t.name()).collect();
        format!("unknown task `{s}` (expected one of {})", names.join(", "))
    })
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Line-delimited corpus to validate and normalize.
    #[arg(long, value_name = "PATH", conflicts_with = "synth", required_unless_present = "synth")]
    pub input: Option<PathBuf>,
    /// Task of the input corpus; taken from the records when omitted.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<TaskKind>,
    /// Accept unknown record fields instead of rejecting the line.
    #[arg(long)]
    pub lenient: bool,
    /// Generate a synthetic corpus for this task instead of reading one.
    #[arg(long, value_name = "TASK", value_parser = parse_task)]
    pub synth: Option<TaskKind>,
    /// Number of synthetic samples.
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    /// Seed of the synthetic generator.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Where to write the normalized dataset.
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    /// Also write the statistics as JSON.
    #[arg(long, value_name = "PATH")]
    pub stats_json: Option<PathBuf>,
    /// Dataset name in the statistics table [default: output file stem].
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainDpArgs {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Run directory to create; must not already hold a run.
    #[arg(long, value_name = "DIR")]
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainUaArgs {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Run directory; rerunning on an interrupted run resumes it.
    #[arg(long, value_name = "DIR")]
    pub run_dir: PathBuf,
    /// Phase-1 checkpoint to start from [default: the run's dp checkpoint].
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Stop after this many steps in this invocation, leaving resumable
    /// progress behind.
    #[arg(long, value_name = "STEPS")]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory whose latest checkpoint (or --stage) is evaluated.
    #[arg(long, value_name = "DIR", required_unless_present = "checkpoint")]
    pub run_dir: Option<PathBuf>,
    /// Checkpoint directory to evaluate instead of a run's lineage.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Lineage stage to evaluate: base, dp or ua [default: latest].
    #[arg(long)]
    pub stage: Option<String>,
    /// Config supplying the [eval] section [default: the run's snapshot].
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dataset whose test split is scored [default: the config's data.path].
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Task of the dataset; taken from the records when omitted.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<TaskKind>,
    /// Where reports go [default: <run-dir>/reports].
    #[arg(long, value_name = "DIR")]
    pub report_dir: Option<PathBuf>,
    /// Label the report as a transfer from this source task.
    #[arg(long, value_name = "TASK", value_parser = parse_task)]
    pub transfer_from: Option<TaskKind>,
    /// Evaluation threads [default: run.workers from the config].
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding evaluation report JSON files.
    #[arg(long, value_name = "DIR")]
    pub reports: PathBuf,
    /// Markdown summary destination [default: <reports>/summary.md].
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}
