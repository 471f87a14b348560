use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use symwd_core::training::LossWeights;

use crate::commands::{read_file, write_file, CliError, Result, EVAL_TIMING_FILE, SUMMARY_FILE, TRAIN_TIMING_FILE};
use crate::ReportArgs;

pub const REPORT_HEADER: &str = "network,accuracy,rmse_in,rmse_out,ratio,train_s,eval_s";

fn parse_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    read_file(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or(CliError::BadSummary { path: path.to_path_buf(), line: i + 1 })
        })
        .collect()
}

fn optional_kv(path: &Path, key: &str) -> Result<String> {
    if !path.exists() {
        return Ok(String::new());
    }
    Ok(parse_kv(path)?.remove(key).unwrap_or_default())
}

/// Independent first, then the bias sweep, then anything else by name.
fn rank(name: &str) -> (usize, String) {
    if name == "independent" {
        return (0, String::new());
    }
    match LossWeights::sweep().iter().position(|(n, _)| *n == name) {
        Some(i) => (i + 1, String::new()),
        None => (usize::MAX, name.to_string()),
    }
}

pub fn run(args: ReportArgs) -> Result<()> {
    let entries = fs::read_dir(&args.runs).map_err(|source| CliError::Read { path: args.runs.clone(), source })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY_FILE).is_file())
        .collect();
    if dirs.is_empty() {
        return Err(CliError::NoSummaries(args.runs.clone()));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs.drain(..) {
        let summary_path = dir.join(SUMMARY_FILE);
        let kv = parse_kv(&summary_path)?;
        let get = |k: &str| kv.get(k).cloned().unwrap_or_default();
        let name = kv
            .get("network")
            .cloned()
            .unwrap_or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        let row = format!(
            "{name},{},{},{},{},{},{}",
            get("accuracy"),
            get("mean_rmse_in"),
            get("mean_rmse_out"),
            get("separation_ratio"),
            optional_kv(&dir.join(TRAIN_TIMING_FILE), "train_seconds")?,
            optional_kv(&dir.join(EVAL_TIMING_FILE), "eval_seconds")?,
        );
        rows.push((rank(&name), row));
    }
    rows.sort();
    let mut csv = format!("{REPORT_HEADER}\n");
    for (_, row) in rows {
        csv.push_str(&row);
        csv.push('\n');
    }
    let out = args.out.unwrap_or_else(|| args.runs.join("report.csv"));
    write_file(&out, &csv)?;
    print!("{csv}");
    Ok(())
}
