mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use symwd_core::model::ArchKind;

#[derive(Debug, Parser)]
#[command(name = "symwd", version, about = "Train and evaluate shared-encoder classifiers with a reconstruction watchdog")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one network, or the whole bias sweep plus the independent pair.
    Train(TrainArgs),
    /// Accuracy, RMSE by source and ROC curves on the mixed evaluation set.
    Eval(EvalArgs),
    /// Per-image watchdog verdicts as CSV.
    Gate(GateArgs),
    /// Merge eval summaries of several runs into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding mnist/ and fashion/ (default: $SYMWD_DATA, then ./data).
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value = "symbiotic", conflicts_with = "sweep")]
    arch: ArchKind,
    #[arg(long, default_value_t = 1.0, conflicts_with = "sweep")]
    class_weight: f32,
    #[arg(long, default_value_t = 0.0, conflicts_with = "sweep")]
    gen_weight: f32,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train the five symbiotic weightings and the independent pair.
    #[arg(long)]
    sweep: bool,
    /// Run directory name under --out (default derived from the weights).
    #[arg(long, conflicts_with = "sweep")]
    name: Option<String>,
    /// Only use the first N training images.
    #[arg(long, value_name = "N")]
    train_limit: Option<usize>,
    /// Percentile of training-set RMSE stored as the default watchdog threshold.
    #[arg(long, default_value_t = 95.0, value_parser = parse_percentile)]
    threshold_percentile: f64,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "runs", value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    /// Watchdog RMSE cutoff on the 0–255 scale.
    #[arg(long, value_parser = parse_threshold, allow_hyphen_values = true)]
    threshold: Option<f64>,
    /// Cutoff at this percentile of training-set RMSE.
    #[arg(long, value_parser = parse_percentile, conflicts_with = "threshold")]
    threshold_percentile: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Fail unless the checkpoint holds this architecture.
    #[arg(long)]
    arch: Option<ArchKind>,
    #[command(flatten)]
    threshold: ThresholdArgs,
    /// Shuffle seed for the mixed set.
    #[arg(long, default_value_t = 0)]
    mix_seed: u64,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory (default: the checkpoint's directory).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GateInput {
    Mixed,
    Digits,
    Fashion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GateSplit {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct GateArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[command(flatten)]
    threshold: ThresholdArgs,
    #[arg(long, value_enum, default_value = "mixed")]
    input: GateInput,
    #[arg(long, value_enum, default_value = "test")]
    split: GateSplit,
    #[arg(long, default_value_t = 0)]
    mix_seed: u64,
    #[command(flatten)]
    data: DataArgs,
    /// CSV destination (default: stdout).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory whose subdirectories hold eval summaries.
    #[arg(long, default_value = "runs", value_name = "DIR")]
    runs: PathBuf,
    /// CSV destination (default: <runs>/report.csv).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn parse_threshold(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if v.is_nan() || v < 0.0 {
        return Err(format!("threshold must be a non-negative number, got {s}"));
    }
    Ok(v)
}

fn parse_percentile(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if !(0.0..=100.0).contains(&v) {
        return Err(format!("percentile must lie in [0, 100], got {s}"));
    }
    Ok(v)
}

/// Training allocates and frees the same multi-megabyte buffers every step.
/// Left to glibc defaults each one is a fresh mmap, and the page faults cost
/// about as much as the arithmetic.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("error: invalid arguments");
            eprintln!("{first}");
            return ExitCode::from(2);
        }
    };
    tune_allocator();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gate(a) => commands::gate(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
