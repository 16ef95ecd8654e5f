use std::sync::Arc;

use nalgebra::{DVector, Vector2, Vector3, Vector6};
use sdc_mpc::dynamics::State;
use sdc_mpc::model::ControlModel;
use sdc_mpc::mpc::{Controller, Nmpc, ReferenceProvider, SdcMpc};

use crate::config::{ControllerKind, ScenarioConfig};
use crate::disturbance::{as_dvector, generate_disturbances, sequence_digest};
use crate::reference::MissionReference;
use crate::telemetry::TelemetryRecord;
use crate::BenchError;

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub controller: ControllerKind,
    pub records: Vec<TelemetryRecord>,
    /// Set when a controller or plant error ended the run early.
    pub fault: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub disturbance_digest: String,
    pub outcomes: Vec<RunOutcome>,
}

pub fn build_controller(
    kind: ControllerKind,
    cfg: &ScenarioConfig,
    model: Arc<dyn ControlModel>,
) -> Result<Box<dyn Controller>, BenchError> {
    let mpc = cfg.mpc_config();
    let obstacle = cfg.obstacle_spec();
    Ok(match kind {
        ControllerKind::Nmpc => Box::new(Nmpc::new(model, mpc, obstacle)?),
        ControllerKind::Sdc => Box::new(SdcMpc::nominal(model, mpc, obstacle)?),
        ControllerKind::RobustSdc => Box::new(SdcMpc::robust(model, mpc, obstacle, cfg.disturbance_observer()?)?),
    })
}

pub fn initial_state(cfg: &ScenarioConfig, reference: &MissionReference) -> DVector<f64> {
    let p = cfg
        .initial_position
        .map(Vector3::from)
        .unwrap_or_else(|| reference.position(0.0));
    DVector::from_column_slice(State::hover_at(p).to_vector().as_slice())
}

fn weighted(m: &nalgebra::DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

fn to_array<const N: usize>(v: &DVector<f64>) -> [f64; N] {
    std::array::from_fn(|i| v[i])
}

/// Runs one controller over the scenario with the given per-step disturbances.
pub fn run_closed_loop(
    kind: ControllerKind,
    cfg: &ScenarioConfig,
    disturbances: &[Vector6<f64>],
) -> Result<RunOutcome, BenchError> {
    let model = cfg.model()?;
    let mut controller = build_controller(kind, cfg, model.clone())?;
    let reference = MissionReference::new(cfg.reference.clone());
    let mpc = cfg.mpc_config();
    let obstacle = cfg.obstacle_spec();
    let positions = model.position_indices().unwrap_or([0, 1]);
    let steps = cfg.steps().min(disturbances.len());

    let mut x = initial_state(cfg, &reference);
    let mut records = Vec::with_capacity(steps);
    let mut fault = None;
    for (k, d) in disturbances.iter().take(steps).enumerate() {
        let t = k as f64 * mpc.ts;
        let x_ref = reference.state(t);
        let res = match controller.step(&x, t, &reference) {
            Ok(res) => res,
            Err(e) => {
                fault = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let d_true = as_dvector(d);
        let path = match model.simulate(&x, &res.u_applied, &d_true, mpc.ts) {
            Ok(path) => path,
            Err(e) => {
                fault = Some(format!("plant at step {k}: {e}"));
                break;
            }
        };
        let obstacle_distance = obstacle.map_or(f64::INFINITY, |o| {
            std::iter::once(&x)
                .chain(path.iter())
                .map(|s| o.distance(&Vector2::new(s[positions[0]], s[positions[1]])))
                .fold(f64::INFINITY, f64::min)
        });
        let stage_cost = weighted(&mpc.q, &(&x - &x_ref)) + weighted(&mpc.r, &res.u_applied);
        records.push(TelemetryRecord {
            t,
            state: to_array(&x),
            p_ref: to_array(&x_ref),
            u: to_array(&res.u_applied),
            d_true: to_array(&d_true),
            d_hat: res.d_hat.as_ref().map_or([0.0; 6], to_array),
            stage_cost,
            objective: res.objective,
            cpu_ms: res.cpu_seconds() * 1e3,
            obstacle_distance,
            qp_iterations: res.qp_iterations,
            feasible: res.feasible,
        });
        let next = path.last().cloned().unwrap_or_else(|| x.clone());
        if !next.iter().all(|v| v.is_finite()) {
            fault = Some(format!("plant state diverged at step {k}"));
            break;
        }
        x = next;
    }
    Ok(RunOutcome {
        controller: kind,
        records,
        fault,
    })
}

/// Generates the disturbance sequence once and runs every controller on its
/// own copy, in worker threads unless `sequential`.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    controllers: &[ControllerKind],
    sequential: bool,
) -> Result<ScenarioRun, BenchError> {
    cfg.validate()?;
    let disturbances = generate_disturbances(cfg)?;
    let disturbance_digest = sequence_digest(&disturbances);
    let outcomes = if sequential {
        controllers
            .iter()
            .map(|&kind| run_closed_loop(kind, cfg, &disturbances))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = controllers
                .iter()
                .map(|&kind| {
                    let private = disturbances.clone();
                    scope.spawn(move || run_closed_loop(kind, cfg, &private))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("controller thread panicked"))
                .collect::<Result<Vec<_>, _>>()
        })?
    };
    Ok(ScenarioRun {
        disturbance_digest,
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DisturbanceMode, PlantKind};
    use crate::telemetry::compute_metrics;

    fn hover_cfg() -> ScenarioConfig {
        let mut cfg = ScenarioConfig {
            duration: 5.0,
            disturbance_mode: DisturbanceMode::None,
            ..ScenarioConfig::default()
        };
        cfg.obstacle.enabled = false;
        cfg.reference.step_time = 1e9;
        cfg
    }

    #[test]
    fn record_count_matches_duration() {
        let cfg = hover_cfg();
        let run = run_closed_loop(ControllerKind::Sdc, &cfg, &generate_disturbances(&cfg).unwrap()).unwrap();
        assert!(run.fault.is_none());
        assert_eq!(run.records.len(), 50);
        assert!(run.records.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn sdc_holds_a_constant_hover() {
        let mut cfg = hover_cfg();
        cfg.initial_position = Some([1.3, 0.2, 0.8]);
        let run = run_closed_loop(ControllerKind::Sdc, &cfg, &generate_disturbances(&cfg).unwrap()).unwrap();
        let last = run.records.last().unwrap();
        assert!(last.position_error_sq().sqrt() <= 0.05);
    }

    #[test]
    fn paired_runs_share_the_disturbance_digest() {
        let mut cfg = hover_cfg();
        cfg.duration = 1.0;
        cfg.disturbance_mode = DisturbanceMode::Gaussian;
        let a = run_scenario(&cfg, &[ControllerKind::Sdc, ControllerKind::RobustSdc], false).unwrap();
        let b = run_scenario(&cfg, &[ControllerKind::Sdc], true).unwrap();
        assert_eq!(a.disturbance_digest, b.disturbance_digest);
        assert_eq!(a.outcomes.len(), 2);
        assert_eq!(a.outcomes[0].records[3].d_true, a.outcomes[1].records[3].d_true);
        // thread scheduling does not change the trajectory
        let strip = |r: &TelemetryRecord| (r.state, r.u);
        assert!(a.outcomes[0].records.iter().map(strip).eq(b.outcomes[0].records.iter().map(strip)));
    }

    #[test]
    fn lti_plant_runs_all_controllers() {
        let mut cfg = hover_cfg();
        cfg.duration = 2.0;
        cfg.plant = PlantKind::HoverLinearization;
        cfg.mpc.kappa = 0.0;
        cfg.reference.step_time = 0.5;
        let run = run_scenario(&cfg, &ControllerKind::ALL, true).unwrap();
        let base = &run.outcomes[1].records;
        for outcome in &run.outcomes {
            assert!(outcome.fault.is_none());
            for (a, b) in outcome.records.iter().zip(base) {
                let gap = a.u.iter().zip(&b.u).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(gap <= 1e-8, "{:?} at t={}: {gap}", outcome.controller, a.t);
            }
        }
        assert_eq!(compute_metrics(base).unwrap().infeasible_steps, 0);
    }
}
