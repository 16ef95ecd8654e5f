use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;

use super::{
    discretize_affine, obstacle_constraints, reference_window, stack, unstack, build_tracking_qp, ControlStepResult,
    Controller, MpcConfig, MpcError, ObstacleSpec, ReferenceProvider,
};
use crate::model::ControlModel;
use crate::observer::DisturbanceObserver;
use crate::qp::{QpDuals, QpSolver, QpStatus, WarmStart};
use crate::riccati::sdre_terminal;

/// Per-step QP controller on the SDC model frozen at the measured state.
/// With an observer attached it becomes the disturbance-compensating variant.
pub struct SdcMpc {
    model: Arc<dyn ControlModel>,
    cfg: MpcConfig,
    obstacle: Option<ObstacleSpec>,
    observer: Option<DisturbanceObserver>,
    solver: QpSolver,
    prev_applied: Option<DVector<f64>>,
    prev_inputs: Option<Vec<DVector<f64>>>,
    prev_states: Option<Vec<DVector<f64>>>,
    prev_duals: Option<QpDuals>,
    prev_normals: Vec<Option<nalgebra::Vector2<f64>>>,
}

impl SdcMpc {
    pub fn nominal(
        model: Arc<dyn ControlModel>,
        cfg: MpcConfig,
        obstacle: Option<ObstacleSpec>,
    ) -> Result<Self, MpcError> {
        cfg.validate(model.state_dim(), model.input_dim())?;
        Ok(Self {
            model,
            cfg,
            obstacle,
            observer: None,
            solver: QpSolver::default(),
            prev_applied: None,
            prev_inputs: None,
            prev_states: None,
            prev_duals: None,
            prev_normals: Vec::new(),
        })
    }

    pub fn robust(
        model: Arc<dyn ControlModel>,
        cfg: MpcConfig,
        obstacle: Option<ObstacleSpec>,
        observer: DisturbanceObserver,
    ) -> Result<Self, MpcError> {
        if observer.d_hat().len() != model.disturbance_dim() {
            return Err(MpcError::Config("observer dimension does not match the model".into()));
        }
        let mut ctrl = Self::nominal(model, cfg, obstacle)?;
        ctrl.observer = Some(observer);
        Ok(ctrl)
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn observer(&self) -> Option<&DisturbanceObserver> {
        self.observer.as_ref()
    }

    fn active_obstacle(&self) -> Option<(ObstacleSpec, [usize; 2])> {
        Some((self.obstacle?, self.model.position_indices()?))
    }
}

/// Previous solution shifted by one step with `tail` appended.
fn shifted(prev: &[DVector<f64>], tail: DVector<f64>) -> Vec<DVector<f64>> {
    prev.iter().skip(1).cloned().chain(std::iter::once(tail)).collect()
}

/// Shifts signed input-bound duals by one step; row duals follow their step.
fn shift_duals(duals: &QpDuals, m: usize, rows_now: usize) -> QpDuals {
    let d = duals.bounds.len();
    let mut bounds = DVector::zeros(d);
    if d > m {
        bounds.rows_mut(0, d - m).copy_from(&duals.bounds.rows(m, d - m));
    }
    let mut constraints = DVector::zeros(rows_now);
    if duals.constraints.len() == rows_now && rows_now > 1 {
        constraints
            .rows_mut(0, rows_now - 1)
            .copy_from(&duals.constraints.rows(1, rows_now - 1));
    }
    QpDuals { constraints, bounds }
}

impl Controller for SdcMpc {
    fn name(&self) -> &'static str {
        if self.observer.is_some() {
            "robust-sdc"
        } else {
            "sdc"
        }
    }

    fn step(
        &mut self,
        x_meas: &DVector<f64>,
        t: f64,
        reference: &dyn ReferenceProvider,
    ) -> Result<ControlStepResult, MpcError> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        let u_eq = self.model.equilibrium_input();

        let d_hat = match self.observer.as_mut() {
            Some(obs) => Some(obs.update(x_meas)?.clone()),
            None => None,
        };

        let u_lin = self.prev_applied.clone().unwrap_or_else(|| u_eq.clone());
        let margins = cfg.input_margins(&u_eq);
        let sdc = self.model.factorize(x_meas, &u_lin)?;
        // near zero thrust the attitude no longer steers the position and the
        // pair loses stabilizability; relinearize at the equilibrium input
        let (sdc, terminal) = match sdre_terminal(&sdc.a, &sdc.b, &cfg.q, &cfg.r, &margins) {
            Ok(terminal) => (sdc, terminal),
            Err(_) if u_lin != u_eq => {
                let sdc = self.model.factorize(x_meas, &u_eq)?;
                let terminal = sdre_terminal(&sdc.a, &sdc.b, &cfg.q, &cfg.r, &margins)?;
                (sdc, terminal)
            }
            Err(e) => return Err(e.into()),
        };
        let p_term = cfg.terminal_weight(&terminal.p, terminal.alpha);
        let disc = discretize_affine(&sdc, cfg.ts);
        let window = reference_window(reference, t, cfg, &u_eq);

        // shifted candidate: previous inputs plus the terminal law. Obstacle
        // halfspaces are linearized along the previous plan, shifted the same
        // way with its terminal state repeated.
        let candidate = match (&self.prev_inputs, &self.prev_states) {
            (Some(inputs), Some(states)) => {
                let x_n = &states[cfg.horizon];
                let tail = cfg.clamp_input(&(&u_eq - &terminal.k * (x_n - &window.states[cfg.horizon - 1])));
                let points = (0..cfg.horizon).map(|i| states[(i + 2).min(cfg.horizon)].clone()).collect::<Vec<_>>();
                Some((shifted(inputs, tail), points))
            }
            _ => None,
        };

        let constraints = match self.active_obstacle() {
            Some((obs, idx)) => {
                let points = candidate.as_ref().map_or(&window.states[1..], |(_, pts)| pts.as_slice());
                obstacle_constraints(&obs, cfg, n, idx, points, &mut self.prev_normals, &window.states[1..])
            }
            None => Vec::new(),
        };

        let models = vec![disc.clone(); cfg.horizon];
        let tqp = build_tracking_qp(&models, &window, cfg, x_meas, &constraints, &p_term, d_hat.as_ref())?;

        let warm = candidate.as_ref().map(|(inputs, _)| WarmStart {
            x: stack(inputs),
            duals: self
                .prev_duals
                .as_ref()
                .map(|d| shift_duals(d, m, tqp.qp.num_constraints())),
        });
        let candidate_objective = warm
            .as_ref()
            .filter(|w| tqp.is_feasible(&w.x, 1e-9))
            .map(|w| tqp.cost(&w.x));

        let sol = self.solver.solve(&tqp.qp, warm.as_ref())?;
        let feasible = sol.status != QpStatus::Infeasible;
        let mut qp_iterations = sol.iterations;

        // an infeasible step still gets the obstacle-relaxed optimum; the
        // previous input is held only when even that fails
        let relaxed = if feasible {
            None
        } else {
            let dim = tqp.qp.dim();
            let mut start_point = DVector::zeros(dim + tqp.qp.num_constraints());
            if let Some(w) = &warm {
                start_point.rows_mut(0, dim).copy_from(&w.x);
            }
            let soft = self.solver.solve(&tqp.soften(cfg.soft_penalty), Some(&WarmStart::primal(start_point)))?;
            qp_iterations += soft.iterations;
            (soft.status != QpStatus::Infeasible).then(|| soft.x.rows(0, dim).into_owned())
        };

        let (u_seq, u_applied) = if let Some(x) = relaxed.as_ref().or(feasible.then_some(&sol.x)) {
            let u_seq = unstack(x, m);
            let applied = cfg.clamp_input(&u_seq[0]);
            (u_seq, applied)
        } else {
            let hold = self.prev_applied.clone().unwrap_or_else(|| u_eq.clone());
            let seq = candidate
                .as_ref()
                .map(|(inputs, _)| inputs.clone())
                .unwrap_or_else(|| vec![hold.clone(); cfg.horizon]);
            (seq, cfg.clamp_input(&hold))
        };
        let u_stacked = stack(&u_seq);
        let states = tqp.trajectory(&u_stacked);
        let objective = tqp.cost(&u_stacked);
        let terminal_in_set = terminal.contains(&(&states[cfg.horizon] - &window.states[cfg.horizon]));
        let obstacle_active = feasible && tqp.active_rows(&u_stacked, 1e-6) > 0;

        if let Some(obs) = self.observer.as_mut() {
            obs.record(x_meas, &u_applied, &sdc);
        }
        self.prev_duals = feasible.then(|| sol.duals.clone());
        self.prev_applied = Some(u_applied.clone());
        self.prev_inputs = Some(u_seq.clone());
        self.prev_states = Some(states.clone());

        Ok(ControlStepResult {
            u_applied,
            predicted_states: states,
            predicted_inputs: u_seq,
            objective,
            qp_status: sol.status,
            qp_iterations,
            sqp_iterations: 0,
            converged: sol.status == QpStatus::Optimal,
            cpu_time: start.elapsed(),
            feasible,
            obstacle_active,
            terminal_in_set,
            candidate_objective,
            d_hat,
        })
    }

    fn reset(&mut self) {
        self.prev_applied = None;
        self.prev_inputs = None;
        self.prev_states = None;
        self.prev_duals = None;
        self.prev_normals.clear();
        if let Some(obs) = self.observer.as_mut() {
            obs.reset();
        }
    }
}
