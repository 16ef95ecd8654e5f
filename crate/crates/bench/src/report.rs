//! Run directories: `<out>/<controller>/{telemetry.csv, metrics.txt, metrics.json, run.json}`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::sim::RunOutcome;
use crate::telemetry::{compute_metrics, to_csv, MetricsSummary};
use crate::BenchError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub controller: String,
    pub seed: u64,
    pub disturbance_digest: String,
    pub records: usize,
    pub fault: Option<String>,
    pub config: ScenarioConfig,
}

fn write(path: PathBuf, contents: &str) -> Result<(), BenchError> {
    fs::write(&path, contents).map_err(|e| BenchError::io(&path, e))
}

/// Writes one controller's files and returns its metrics.
pub fn write_run(
    out: &Path,
    cfg: &ScenarioConfig,
    outcome: &RunOutcome,
    disturbance_digest: &str,
) -> Result<MetricsSummary, BenchError> {
    let dir = out.join(outcome.controller.name());
    fs::create_dir_all(&dir).map_err(|e| BenchError::io(&dir, e))?;
    write(dir.join("telemetry.csv"), &to_csv(&outcome.records))?;
    let meta = RunMetadata {
        controller: outcome.controller.name().to_string(),
        seed: cfg.seed,
        disturbance_digest: disturbance_digest.to_string(),
        records: outcome.records.len(),
        fault: outcome.fault.clone(),
        config: cfg.clone(),
    };
    write(dir.join("run.json"), &serde_json::to_string_pretty(&meta)?)?;
    let metrics = compute_metrics(&outcome.records)?;
    write(dir.join("metrics.txt"), &metrics.to_key_values())?;
    write(dir.join("metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
    Ok(metrics)
}

/// Metrics of every run directory under `out`, sorted by controller name.
pub fn collect_runs(out: &Path) -> Result<Vec<(RunMetadata, MetricsSummary)>, BenchError> {
    let entries = fs::read_dir(out).map_err(|e| BenchError::io(out, e))?;
    let mut runs = Vec::new();
    for entry in entries {
        let dir = entry.map_err(|e| BenchError::io(out, e))?.path();
        let (meta_path, metrics_path) = (dir.join("run.json"), dir.join("metrics.json"));
        if !meta_path.is_file() || !metrics_path.is_file() {
            continue;
        }
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| BenchError::io(p, e));
        let meta: RunMetadata = serde_json::from_str(&read(&meta_path)?)?;
        let metrics: MetricsSummary = serde_json::from_str(&read(&metrics_path)?)?;
        runs.push((meta, metrics));
    }
    if runs.is_empty() {
        return Err(BenchError::NoRuns(out.to_path_buf()));
    }
    runs.sort_by(|a, b| a.0.controller.cmp(&b.0.controller));
    Ok(runs)
}

/// Plain-text comparison table with CPU time relative to the NMPC run.
pub fn comparison_table(runs: &[(RunMetadata, MetricsSummary)]) -> String {
    let nmpc_cpu = runs
        .iter()
        .find(|(m, _)| m.controller == "nmpc")
        .map(|(_, s)| s.avg_cpu_ms);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>12} {:>10} {:>12} {:>14} {:>11} {:>10}",
        "controller", "avg_cpu_ms", "cpu/nmpc", "mse_m2", "total_cost", "min_dist_m", "infeasible"
    );
    for (meta, s) in runs {
        let ratio = nmpc_cpu.map_or_else(|| "-".to_string(), |c| format!("{:.3}", s.avg_cpu_ms / c));
        let dist = s.min_obstacle_distance.map_or_else(|| "-".to_string(), |d| format!("{d:.4}"));
        let _ = writeln!(
            out,
            "{:<12} {:>12.3} {:>10} {:>12.5} {:>14.1} {:>11} {:>10}",
            meta.controller, s.avg_cpu_ms, ratio, s.mse_m2, s.total_cost, dist, s.infeasible_steps
        );
    }
    let digests: std::collections::BTreeSet<_> = runs.iter().map(|(m, _)| m.disturbance_digest.as_str()).collect();
    if digests.len() > 1 {
        out.push_str("warning: runs used different disturbance sequences\n");
    }
    out
}
