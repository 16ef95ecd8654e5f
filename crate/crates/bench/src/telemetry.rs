use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::BenchError;

/// One control step of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRecord {
    pub t: f64,
    pub state: [f64; 12],
    /// Reference position at `t`.
    pub p_ref: [f64; 3],
    pub u: [f64; 4],
    pub d_true: [f64; 6],
    pub d_hat: [f64; 6],
    pub stage_cost: f64,
    pub objective: f64,
    pub cpu_ms: f64,
    /// Smallest horizontal distance to the obstacle center over the plant
    /// samples of this step; infinite without an obstacle.
    pub obstacle_distance: f64,
    pub qp_iterations: usize,
    pub feasible: bool,
}

impl TelemetryRecord {
    pub fn position_error_sq(&self) -> f64 {
        (0..3).map(|i| (self.state[i] - self.p_ref[i]).powi(2)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub avg_cpu_ms: f64,
    pub mse_m2: f64,
    pub total_cost: f64,
    /// `None` when the run had no obstacle.
    pub min_obstacle_distance: Option<f64>,
    pub infeasible_steps: usize,
}

impl MetricsSummary {
    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let min_dist = self
            .min_obstacle_distance
            .map_or_else(|| "none".to_string(), |d| format!("{d:.9}"));
        format!(
            "avg_cpu_ms={:.6}\nmse_m2={:.9}\ntotal_cost={:.6}\nmin_obstacle_distance={}\ninfeasible_steps={}\n",
            self.avg_cpu_ms, self.mse_m2, self.total_cost, min_dist, self.infeasible_steps
        )
    }
}

pub fn compute_metrics(records: &[TelemetryRecord]) -> Result<MetricsSummary, BenchError> {
    if records.is_empty() {
        return Err(BenchError::EmptyTelemetry);
    }
    let n = records.len() as f64;
    let min_dist = records.iter().map(|r| r.obstacle_distance).fold(f64::INFINITY, f64::min);
    Ok(MetricsSummary {
        avg_cpu_ms: records.iter().map(|r| r.cpu_ms).sum::<f64>() / n,
        mse_m2: records.iter().map(TelemetryRecord::position_error_sq).sum::<f64>() / n,
        total_cost: records.iter().map(|r| r.stage_cost).sum(),
        min_obstacle_distance: min_dist.is_finite().then_some(min_dist),
        infeasible_steps: records.iter().filter(|r| !r.feasible).count(),
    })
}

const STATE_NAMES: [&str; 12] = ["px", "py", "pz", "vx", "vy", "vz", "phi", "theta", "psi", "wx", "wy", "wz"];
const INPUT_NAMES: [&str; 4] = ["thrust", "tau_x", "tau_y", "tau_z"];
const DISTURBANCE_NAMES: [&str; 6] = ["fx", "fy", "fz", "tx", "ty", "tz"];

pub fn csv_header() -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend(STATE_NAMES.iter().map(|s| s.to_string()));
    cols.extend(["ref_px", "ref_py", "ref_pz"].iter().map(|s| s.to_string()));
    cols.extend(INPUT_NAMES.iter().map(|s| s.to_string()));
    cols.extend(DISTURBANCE_NAMES.iter().map(|s| format!("d_{s}")));
    cols.extend(DISTURBANCE_NAMES.iter().map(|s| format!("dhat_{s}")));
    cols.extend(
        ["stage_cost", "objective", "cpu_ms", "obstacle_distance", "qp_iterations", "feasible"]
            .iter()
            .map(|s| s.to_string()),
    );
    cols.join(",")
}

/// Nine significant digits.
fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8e}")
    } else {
        v.to_string()
    }
}

pub fn to_csv(records: &[TelemetryRecord]) -> String {
    let mut out = csv_header();
    out.push('\n');
    for r in records {
        let fields = std::iter::once(r.t)
            .chain(r.state)
            .chain(r.p_ref)
            .chain(r.u)
            .chain(r.d_true)
            .chain(r.d_hat)
            .chain([r.stage_cost, r.objective, r.cpu_ms, r.obstacle_distance])
            .map(num)
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(out, "{fields},{},{}", r.qp_iterations, u8::from(r.feasible));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(t: f64, p: [f64; 3], p_ref: [f64; 3], stage_cost: f64, cpu_ms: f64) -> TelemetryRecord {
        let mut state = [0.0; 12];
        state[..3].copy_from_slice(&p);
        TelemetryRecord {
            t,
            state,
            p_ref,
            u: [0.0; 4],
            d_true: [0.0; 6],
            d_hat: [0.0; 6],
            stage_cost,
            objective: 0.0,
            cpu_ms,
            obstacle_distance: f64::INFINITY,
            qp_iterations: 0,
            feasible: true,
        }
    }

    #[test]
    fn empty_telemetry_is_an_error() {
        assert!(matches!(compute_metrics(&[]), Err(BenchError::EmptyTelemetry)));
    }

    #[test]
    fn perfect_tracking_costs_nothing() {
        let recs: Vec<_> = (0..5).map(|k| record(k as f64 * 0.1, [1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 0.0, 1.0)).collect();
        let m = compute_metrics(&recs).unwrap();
        assert_eq!(m.mse_m2, 0.0);
        assert_eq!(m.total_cost, 0.0);
        assert_eq!(m.min_obstacle_distance, None);
    }

    #[test]
    fn constant_offset_mse() {
        let recs: Vec<_> = (0..10).map(|k| record(k as f64, [0.1, 0.0, 1.0], [0.0, 0.0, 1.0], 0.0, 0.0)).collect();
        assert!((compute_metrics(&recs).unwrap().mse_m2 - 0.01).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_fixture() {
        let mut recs = vec![
            record(0.0, [0.0, 0.0, 1.0], [0.0, 0.0, 1.0], 1.5, 2.0),
            record(0.1, [0.3, 0.4, 1.0], [0.0, 0.0, 1.0], 2.5, 4.0),
            record(0.2, [1.0, 0.0, 0.0], [1.0, 0.0, 2.0], 6.0, 9.0),
        ];
        recs[1].obstacle_distance = 0.7;
        recs[2].obstacle_distance = 0.6;
        recs[2].feasible = false;
        let m = compute_metrics(&recs).unwrap();
        // squared errors 0, 0.25, 4
        assert!((m.mse_m2 - 4.25 / 3.0).abs() < 1e-15);
        assert_eq!(m.total_cost, 10.0);
        assert_eq!(m.avg_cpu_ms, 5.0);
        assert_eq!(m.min_obstacle_distance, Some(0.6));
        assert_eq!(m.infeasible_steps, 1);
    }

    #[test]
    fn csv_layout() {
        let recs = vec![record(0.0, [1.0 / 3.0, 0.0, 1.0], [0.0, 0.0, 1.0], 0.0, 1.0)];
        let text = to_csv(&recs);
        let lines: Vec<_> = text.lines().collect();
        let header: Vec<_> = lines[0].split(',').collect();
        let row: Vec<_> = lines[1].split(',').collect();
        assert_eq!(header.len(), 38);
        assert_eq!(row.len(), header.len());
        assert_eq!(header[1], "px");
        assert_eq!(row[1], "3.33333333e-1");
        assert_eq!(header.last(), Some(&"feasible"));
        assert_eq!(row.last(), Some(&"1"));
        assert_eq!(row[header.iter().position(|h| *h == "obstacle_distance").unwrap()], "inf");
    }

    #[test]
    fn key_value_block() {
        let m = MetricsSummary {
            avg_cpu_ms: 1.25,
            mse_m2: 0.03,
            total_cost: 12.0,
            min_obstacle_distance: Some(0.55),
            infeasible_steps: 0,
        };
        let text = m.to_key_values();
        for key in ["avg_cpu_ms=", "mse_m2=", "total_cost=", "min_obstacle_distance=", "infeasible_steps="] {
            assert_eq!(text.lines().filter(|l| l.starts_with(key)).count(), 1, "{key}");
        }
    }
}
