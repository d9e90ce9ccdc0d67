//! Output directories and the tables written into them.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use orso::orchestrator::{write_records, RunOutput};
use orso::{RunRecord, RunSummary};
use serde::Serialize;

pub const SUMMARY_HEADER: &str = "budget,k,algo,seed,best_j,norm_regret,iters_to_threshold";
pub const CURVE_HEADER: &str = "step,best_so_far,regret";

/// Refuses an existing directory unless `force`, in which case it is
/// replaced.
pub fn prepare_dir(path: &Path, force: bool) -> Result<(), String> {
    if path.exists() {
        if !force {
            return Err(format!(
                "output directory {} already exists (pass --force to replace it)",
                path.display()
            ));
        }
        if path.is_dir() {
            fs::remove_dir_all(path)
        } else {
            fs::remove_file(path)
        }
        .map_err(|e| format!("cannot clear {}: {e}", path.display()))?;
    }
    fs::create_dir_all(path).map_err(|e| format!("cannot create {}: {e}", path.display()))
}

pub fn summary_row(s: &RunSummary) -> String {
    let norm = s
        .final_norm_regret
        .map_or_else(|| "none".to_string(), |v| v.to_string());
    let iters: Vec<String> = s
        .iterations_to_threshold
        .iter()
        .map(|h| h.step.map_or_else(|| "none".to_string(), |v| v.to_string()))
        .collect();
    format!(
        "{},{},{},{},{},{},{}",
        s.budget_b,
        s.k,
        s.algo,
        s.seed,
        s.best_j,
        norm,
        iters.join(";")
    )
}

/// `(step, best_so_far, regret)` for every record.
pub fn curve(records: &[RunRecord], j_ref: f64) -> Vec<(u64, f64, f64)> {
    records
        .iter()
        .map(|r| (r.step, r.best_so_far_j, j_ref - r.best_so_far_j))
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).map_err(io::Error::other)?);
        text.push('\n');
    }
    fs::write(path, text)
}

/// Writes everything one run produced into `dir`, which must exist.
pub fn write_run(dir: &Path, out: &mut RunOutput) -> io::Result<()> {
    write_records(&dir.join("records.jsonl"), &out.records).map_err(io::Error::other)?;
    out.summary.records_file = Some("records.jsonl".into());
    let json = serde_json::to_string_pretty(&out.summary).map_err(io::Error::other)?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    fs::write(
        dir.join("summary.csv"),
        format!("{SUMMARY_HEADER}\n{}\n", summary_row(&out.summary)),
    )?;
    let mut text = format!("{CURVE_HEADER}\n");
    for (step, best, regret) in curve(&out.records, out.summary.j_ref) {
        let _ = writeln!(text, "{step},{best},{regret}");
    }
    fs::write(dir.join("curve.csv"), text)?;
    write_jsonl(&dir.join("snapshots.jsonl"), &out.snapshots)?;
    write_jsonl(&dir.join("audit.jsonl"), &out.audit)?;
    write_jsonl(&dir.join("specs.jsonl"), &out.specs)?;
    Ok(())
}

/// Mean and standard error of the mean; the error is zero for one sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
