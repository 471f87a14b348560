use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use symwd_core::data::{build_mixed, DataDir, DataError, ImageDataset, SourceTag, Split};
use symwd_core::eval::{self, EvalError};
use symwd_core::model::checkpoint::{Checkpoint, CheckpointError, TrainingMeta};
use symwd_core::model::{ArchKind, ArchSpec, Network};
use symwd_core::training::{train_network, EpochLog, LossWeights, TrainConfig, TrainError};
use symwd_core::watchdog::{self, WatchdogConfig, WatchdogError};
use thiserror::Error;

use crate::{EvalArgs, GateArgs, GateInput, GateSplit, ThresholdArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.swd";
pub const LOSS_FILE: &str = "loss.csv";
pub const TRAIN_TIMING_FILE: &str = "train_timing.txt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const EVAL_TIMING_FILE: &str = "eval_timing.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path:?}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Watchdog(#[from] WatchdogError),
    #[error("cannot write {path:?}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read {path:?}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path:?} architecture is {found}, expected {expected}")]
    ArchMismatch { path: PathBuf, expected: ArchKind, found: ArchKind },
    #[error("checkpoint {0:?} has no stored watchdog threshold; pass --threshold or --threshold-percentile")]
    NoThreshold(PathBuf),
    #[error("no eval summaries found under {0:?}")]
    NoSummaries(PathBuf),
    #[error("{path:?} line {line}: expected key=value")]
    BadSummary { path: PathBuf, line: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Train(TrainError::InvalidWeights { .. }) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| CliError::Write { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|source| CliError::Checkpoint { path: path.to_path_buf(), source })
}

fn run_name(arch: ArchKind, weights: LossWeights) -> String {
    if arch == ArchKind::Independent {
        return "independent".into();
    }
    LossWeights::sweep()
        .into_iter()
        .find(|(_, w)| *w == weights)
        .map(|(name, _)| name.to_string())
        .unwrap_or_else(|| format!("symbiotic-c{}-g{}", weights.classifier, weights.generator))
}

fn load_training_set(data: &DataDir, limit: Option<usize>) -> Result<ImageDataset> {
    let train = data.load(SourceTag::Digits, Split::Train)?;
    Ok(match limit {
        Some(n) if n < train.len() => train.head(n)?,
        _ => train,
    })
}

/// Watchdog cutoff at the given percentile of per-image RMSE over `data`.
fn percentile_threshold(net: &Network, data: &ImageDataset, pct: f64) -> Result<f64> {
    let scored = watchdog::score(net.as_guarded(), &data.images)?;
    let rmse: Vec<f64> = scored.iter().map(|s| s.rmse).collect();
    Ok(watchdog::percentile(&rmse, pct)?)
}

struct Job {
    name: String,
    arch: ArchKind,
    weights: LossWeights,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let jobs: Vec<Job> = if args.sweep {
        let mut jobs: Vec<Job> = LossWeights::sweep()
            .into_iter()
            .map(|(name, weights)| Job { name: name.into(), arch: ArchKind::Symbiotic, weights })
            .collect();
        jobs.push(Job {
            name: "independent".into(),
            arch: ArchKind::Independent,
            weights: LossWeights::CLASSIFIER_BIASED,
        });
        jobs
    } else {
        let weights = LossWeights::new(args.class_weight, args.gen_weight)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let name = args.name.clone().unwrap_or_else(|| run_name(args.arch, weights));
        vec![Job { name, arch: args.arch, weights }]
    };
    let base = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: args.seed,
        loss_weights: LossWeights::CLASSIFIER_BIASED,
    };
    base.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let data = load_training_set(&DataDir::resolve(args.data.data_dir.as_deref()), args.train_limit)?;
    for job in jobs {
        let config = TrainConfig { loss_weights: job.weights, ..base.clone() };
        let mut net = Network::build(job.arch, ArchSpec::default(), args.seed);
        let name = job.name.as_str();
        let epochs = config.epochs;
        let report = train_network(&mut net, &data, &config, &mut |e: &EpochLog| {
            let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.5}"));
            eprintln!(
                "{name} epoch {}/{epochs}: classifier_loss={} generator_loss={} ({:.1}s)",
                e.epoch,
                fmt(e.classifier_loss),
                fmt(e.generator_loss),
                e.seconds_elapsed
            );
        })?;
        let threshold = percentile_threshold(&net, &data, args.threshold_percentile)?;
        let meta = TrainingMeta {
            seed: args.seed,
            loss_weights: (job.arch == ArchKind::Symbiotic).then_some(job.weights),
            epochs: config.epochs,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            watchdog_threshold: Some(threshold),
        };
        let dir = args.out.join(name);
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        fs::create_dir_all(&dir).map_err(|source| CliError::Write { path: dir.clone(), source })?;
        Checkpoint::new(net, meta)
            .save(&ckpt_path)
            .map_err(|source| CliError::Checkpoint { path: ckpt_path.clone(), source })?;
        write_file(&dir.join(LOSS_FILE), &report.to_csv())?;
        let secs = report.duration.as_secs_f64();
        write_file(&dir.join(TRAIN_TIMING_FILE), &format!("train_seconds={secs}\n"))?;
        println!("{name}: {} steps, train_seconds={secs:.3}, watchdog_threshold={threshold:.4}, checkpoint {}", report.steps, ckpt_path.display());
    }
    Ok(())
}

fn resolve_threshold(ckpt: &Checkpoint, path: &Path, args: &ThresholdArgs, data: &DataDir) -> Result<WatchdogConfig> {
    let t = match (args.threshold, args.threshold_percentile) {
        (Some(t), _) => t,
        (None, Some(p)) => percentile_threshold(&ckpt.network, &data.load(SourceTag::Digits, Split::Train)?, p)?,
        (None, None) => ckpt.training.watchdog_threshold.ok_or_else(|| CliError::NoThreshold(path.to_path_buf()))?,
    };
    Ok(WatchdogConfig::new(t)?)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let found = ckpt.network.kind();
    if let Some(expected) = args.arch {
        if expected != found {
            return Err(CliError::ArchMismatch { path: args.checkpoint.clone(), expected, found });
        }
    }
    let data = DataDir::resolve(args.data.data_dir.as_deref());
    let digits = data.load(SourceTag::Digits, Split::Test)?;
    let fashion = data.load(SourceTag::Fashion, Split::Test)?;
    let config = resolve_threshold(&ckpt, &args.checkpoint, &args.threshold, &data)?;
    let mixed = build_mixed(&digits, &fashion, args.mix_seed);
    drop((digits, fashion));

    let report = eval::evaluate(ckpt.network.as_guarded(), &mixed, config)?;

    let out = args
        .out
        .clone()
        .or_else(|| args.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    let name = args
        .checkpoint
        .parent()
        .and_then(Path::file_name)
        .map_or_else(|| found.to_string(), |n| n.to_string_lossy().into_owned());
    let summary = format!("network={name}\narch={found}\n{}", report.summary());
    write_file(&out.join(SUMMARY_FILE), &summary)?;
    write_file(&out.join("roc_unguarded.csv"), &report.roc_unguarded.to_csv())?;
    write_file(&out.join("roc_guarded.csv"), &report.roc_guarded.to_csv())?;
    write_file(&out.join("roc_rmse.csv"), &report.roc_rmse.to_csv())?;
    write_file(&out.join(EVAL_TIMING_FILE), &format!("eval_seconds={}\n", report.eval_seconds))?;
    print!("{summary}");
    println!("eval_seconds={:.3}", report.eval_seconds);
    Ok(())
}

pub fn gate(args: GateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = DataDir::resolve(args.data.data_dir.as_deref());
    let config = resolve_threshold(&ckpt, &args.checkpoint, &args.threshold, &data)?;
    let split = match args.split {
        GateSplit::Train => Split::Train,
        GateSplit::Test => Split::Test,
    };
    let (images, sources, labels) = match args.input {
        GateInput::Mixed => {
            let mixed = build_mixed(&data.load(SourceTag::Digits, split)?, &data.load(SourceTag::Fashion, split)?, args.mix_seed);
            let sources = mixed
                .tags
                .iter()
                .map(|t| match t {
                    symwd_core::data::Distribution::In => SourceTag::Digits,
                    symwd_core::data::Distribution::Out => SourceTag::Fashion,
                })
                .collect();
            (mixed.images, sources, mixed.labels)
        }
        GateInput::Digits | GateInput::Fashion => {
            let tag = if args.input == GateInput::Digits { SourceTag::Digits } else { SourceTag::Fashion };
            let d = data.load(tag, split)?;
            (d.images, vec![tag; d.labels.len()], d.labels)
        }
    };
    let gated = watchdog::gate(ckpt.network.as_guarded(), &images, config)?;
    let csv = watchdog::gate_csv(&gated, &sources, &labels);
    match &args.out {
        Some(path) => write_file(path, &csv)?,
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|source| CliError::Write { path: "<stdout>".into(), source })?,
    }
    for tag in [SourceTag::Digits, SourceTag::Fashion] {
        let total = sources.iter().filter(|&&s| s == tag).count();
        if total > 0 {
            let rejected = gated.iter().zip(&sources).filter(|(g, &s)| s == tag && !g.accepted).count();
            eprintln!("{tag}: rejected {rejected} of {total} at threshold {}", config.threshold());
        }
    }
    Ok(())
}
