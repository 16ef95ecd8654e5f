use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector2};

use super::{
    build_tracking_qp, obstacle_constraints, position, reference_window, stack, unstack, ControlStepResult, Controller,
    DiscreteModel, MpcConfig, MpcError, ObstacleSpec, ReferenceProvider, ReferenceWindow, StateConstraint,
};
use crate::model::ControlModel;
use crate::qp::{QpDuals, QpSolver, QpStatus, WarmStart};
use crate::riccati::{shifted_terminal, TerminalIngredients};

const ARMIJO: f64 = 1e-4;
const BACKTRACKS: usize = 10;

/// Nonlinear MPC solved by SQP over a multiple-shooting transcription of the
/// model's discrete transition, with a Gauss–Newton Hessian and an l1 merit
/// line search. The terminal weight comes from a shifted Lyapunov equation at
/// the equilibrium, computed once.
pub struct Nmpc {
    model: Arc<dyn ControlModel>,
    cfg: MpcConfig,
    obstacle: Option<ObstacleSpec>,
    solver: QpSolver,
    terminal: TerminalIngredients,
    p_term: DMatrix<f64>,
    prev_states: Option<Vec<DVector<f64>>>,
    prev_inputs: Option<Vec<DVector<f64>>>,
    prev_duals: Option<QpDuals>,
    prev_normals: Vec<Option<Vector2<f64>>>,
}

struct Iterate {
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
}

impl Nmpc {
    pub fn new(model: Arc<dyn ControlModel>, cfg: MpcConfig, obstacle: Option<ObstacleSpec>) -> Result<Self, MpcError> {
        cfg.validate(model.state_dim(), model.input_dim())?;
        let u_eq = model.equilibrium_input();
        let lin = model.factorize(&model.equilibrium_state(), &u_eq)?;
        let terminal = shifted_terminal(&lin.a, &lin.b, &cfg.q, &cfg.r, cfg.kappa, &cfg.input_margins(&u_eq))?;
        let p_term = cfg.terminal_weight(&terminal.p, terminal.alpha);
        Ok(Self {
            model,
            cfg,
            obstacle,
            solver: QpSolver::default(),
            terminal,
            p_term,
            prev_states: None,
            prev_inputs: None,
            prev_duals: None,
            prev_normals: Vec::new(),
        })
    }

    pub fn terminal(&self) -> &TerminalIngredients {
        &self.terminal
    }

    fn cost(&self, it: &Iterate, window: &ReferenceWindow) -> f64 {
        let horizon = self.cfg.horizon;
        let mut total = 0.0;
        for i in 0..horizon {
            let e = &it.states[i] - &window.states[i];
            total += e.dot(&(&self.cfg.q * &e)) + it.inputs[i].dot(&(&self.cfg.r * &it.inputs[i]));
        }
        let e = &it.states[horizon] - &window.states[horizon];
        total + e.dot(&(&self.p_term * &e))
    }

    /// Gradient of the cost along `(dx, du)`; `dx[0]` is ignored.
    fn cost_slope(&self, it: &Iterate, dir: &Iterate, window: &ReferenceWindow) -> f64 {
        let horizon = self.cfg.horizon;
        let mut slope = 0.0;
        for i in 0..horizon {
            if i > 0 {
                let e = &it.states[i] - &window.states[i];
                slope += 2.0 * e.dot(&(&self.cfg.q * &dir.states[i]));
            }
            slope += 2.0 * it.inputs[i].dot(&(&self.cfg.r * &dir.inputs[i]));
        }
        let e = &it.states[horizon] - &window.states[horizon];
        slope + 2.0 * e.dot(&(&self.p_term * &dir.states[horizon]))
    }

    /// l1 norm of dynamics defects and linearized constraint violations.
    fn infeasibility(
        &self,
        it: &Iterate,
        next: &[DVector<f64>],
        constraints: &[Vec<StateConstraint>],
    ) -> f64 {
        let defects: f64 = (0..self.cfg.horizon)
            .map(|i| (&next[i] - &it.states[i + 1]).lp_norm(1))
            .sum();
        let violation: f64 = constraints
            .iter()
            .enumerate()
            .flat_map(|(i, rows)| rows.iter().map(move |c| (i, c)))
            .map(|(i, c)| (c.lower - c.row.dot(&it.states[i + 1])).max(0.0))
            .sum();
        defects + violation
    }

    fn rollout_next(&self, it: &Iterate) -> Result<Vec<DVector<f64>>, MpcError> {
        (0..self.cfg.horizon)
            .map(|i| Ok(self.model.step(&it.states[i], &it.inputs[i], self.cfg.ts)?))
            .collect()
    }

    fn initial_guess(&self, x_meas: &DVector<f64>, window: &ReferenceWindow) -> Iterate {
        let cfg = &self.cfg;
        let u_eq = self.model.equilibrium_input();
        // a guess state must admit another step; otherwise the last valid
        // state is repeated
        let advance = |x: &DVector<f64>, u: &DVector<f64>| {
            self.model
                .step(x, u, cfg.ts)
                .ok()
                .filter(|next| self.model.step(next, u, cfg.ts).is_ok())
                .unwrap_or_else(|| x.clone())
        };
        let mut it = match (&self.prev_states, &self.prev_inputs) {
            (Some(states), Some(inputs)) => {
                let x_n = &states[cfg.horizon];
                let tail = cfg.clamp_input(&(&u_eq - &self.terminal.k * (x_n - &window.states[cfg.horizon - 1])));
                let last = advance(x_n, &tail);
                let mut new_states = vec![x_meas.clone()];
                new_states.extend(states.iter().skip(2).cloned());
                new_states.push(last);
                let mut new_inputs: Vec<DVector<f64>> = inputs.iter().skip(1).cloned().collect();
                new_inputs.push(tail);
                Iterate {
                    states: new_states,
                    inputs: new_inputs,
                }
            }
            _ => {
                let inputs = vec![u_eq; cfg.horizon];
                let mut states = vec![x_meas.clone()];
                for u in &inputs {
                    let next = advance(states.last().expect("non-empty"), u);
                    states.push(next);
                }
                Iterate { states, inputs }
            }
        };
        it.states[0] = x_meas.clone();
        it
    }

    /// Cost of the shifted previous inputs simulated from `x_meas`, if that
    /// rollout stays in the model's domain and respects the inflated obstacle.
    fn candidate_cost(&self, guess: &Iterate, window: &ReferenceWindow) -> Option<f64> {
        self.prev_inputs.as_ref()?;
        let mut states = vec![guess.states[0].clone()];
        for u in &guess.inputs {
            let next = self.model.step(states.last().expect("non-empty"), u, self.cfg.ts).ok()?;
            states.push(next);
        }
        if let (Some(obs), Some(idx)) = (self.obstacle, self.model.position_indices()) {
            let safe = (1..=self.cfg.horizon).all(|i| {
                obs.distance(&position(&states[i], idx))
                    >= obs.radius + obs.margin_at(i, self.cfg.margin_ramp_steps) - 1e-9
            });
            if !safe {
                return None;
            }
        }
        let rollout = Iterate {
            states,
            inputs: guess.inputs.clone(),
        };
        Some(self.cost(&rollout, window))
    }
}

impl Controller for Nmpc {
    fn name(&self) -> &'static str {
        "nmpc"
    }

    fn step(
        &mut self,
        x_meas: &DVector<f64>,
        t: f64,
        reference: &dyn ReferenceProvider,
    ) -> Result<ControlStepResult, MpcError> {
        let start = Instant::now();
        let horizon = self.cfg.horizon;
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        let p = self.model.disturbance_dim();
        let ts = self.cfg.ts;
        let u_eq = self.model.equilibrium_input();
        let window = reference_window(reference, t, &self.cfg, &u_eq);

        let mut it = self.initial_guess(x_meas, &window);
        let candidate_objective = self.candidate_cost(&it, &window);
        let mut warm_duals = self.prev_duals.take();
        let mut penalty: f64 = 0.0;
        let mut qp_iterations = 0;
        let mut sqp_iterations = 0;
        let mut converged = false;
        let mut feasible = true;
        let mut status = QpStatus::Optimal;
        let mut obstacle_active = false;

        while sqp_iterations < self.cfg.sqp_max_iters {
            sqp_iterations += 1;
            let transitions = (0..horizon)
                .map(|i| self.model.transition(&it.states[i], &it.inputs[i], ts))
                .collect::<Result<Vec<_>, _>>()?;
            let models: Vec<DiscreteModel> = transitions
                .iter()
                .enumerate()
                .map(|(i, tr)| DiscreteModel {
                    c: &tr.next - &tr.a * &it.states[i] - &tr.b * &it.inputs[i],
                    a: tr.a.clone(),
                    b: tr.b.clone(),
                    e: DMatrix::zeros(n, p),
                })
                .collect();
            let constraints = match (self.obstacle, self.model.position_indices()) {
                (Some(obs), Some(idx)) => obstacle_constraints(
                    &obs,
                    &self.cfg,
                    n,
                    idx,
                    &it.states[1..],
                    &mut self.prev_normals,
                    &window.states[1..],
                ),
                _ => Vec::new(),
            };
            let tqp = build_tracking_qp(&models, &window, &self.cfg, x_meas, &constraints, &self.p_term, None)?;
            let dim = tqp.qp.dim();
            let rows = tqp.qp.num_constraints();

            let warm = WarmStart {
                x: stack(&it.inputs),
                duals: warm_duals
                    .take()
                    .filter(|d| d.constraints.len() == rows && d.bounds.len() == dim),
            };
            let sol = self.solver.solve(&tqp.qp, Some(&warm))?;
            qp_iterations += sol.iterations;
            status = sol.status;

            let (u_new, row_duals) = if sol.status == QpStatus::Infeasible {
                let soft = tqp.soften(self.cfg.soft_penalty);
                let mut start_point = DVector::zeros(dim + rows);
                start_point.rows_mut(0, dim).copy_from(&warm.x);
                let relaxed = self.solver.solve(&soft, Some(&WarmStart::primal(start_point)))?;
                qp_iterations += relaxed.iterations;
                status = relaxed.status;
                if relaxed.status == QpStatus::Infeasible {
                    feasible = false;
                    break;
                }
                let slack: f64 = relaxed.x.rows(dim, rows).iter().map(|v| v.max(0.0)).sum();
                feasible = slack <= 1e-6;
                (relaxed.x.rows(0, dim).into_owned(), relaxed.duals.constraints.clone())
            } else {
                feasible = true;
                warm_duals = Some(sol.duals.clone());
                (sol.x.clone(), sol.duals.constraints.clone())
            };
            obstacle_active = tqp.active_rows(&u_new, 1e-6) > 0;

            let target = Iterate {
                states: tqp.trajectory(&u_new),
                inputs: unstack(&u_new, m),
            };
            let dir = Iterate {
                states: (0..=horizon).map(|i| &target.states[i] - &it.states[i]).collect(),
                inputs: (0..horizon).map(|i| &target.inputs[i] - &it.inputs[i]).collect(),
            };
            let step_norm = dir
                .states
                .iter()
                .chain(dir.inputs.iter())
                .map(|v| v.amax())
                .fold(0.0, f64::max);

            // defect multipliers by the adjoint recursion at the subproblem optimum
            let mut row_terms = vec![DVector::<f64>::zeros(n); horizon + 1];
            for (r, &step) in tqp.row_steps.iter().enumerate() {
                let c = &constraints[step - 1][0];
                row_terms[step] += &c.row * row_duals[r];
            }
            let mut lambda_max: f64 = row_duals.amax();
            let e_n = &target.states[horizon] - &window.states[horizon];
            let mut lambda = (&self.p_term * e_n) * 2.0 + &row_terms[horizon];
            lambda_max = lambda_max.max(lambda.amax());
            for i in (1..horizon).rev() {
                let e = &target.states[i] - &window.states[i];
                lambda = (&self.cfg.q * e) * 2.0 + transitions[i].a.tr_mul(&lambda) + &row_terms[i];
                lambda_max = lambda_max.max(lambda.amax());
            }
            penalty = penalty.max(1.1 * lambda_max + 1e-6);

            let next: Vec<DVector<f64>> = transitions.iter().map(|tr| tr.next.clone()).collect();
            let infeas0 = self.infeasibility(&it, &next, &constraints);
            let merit0 = self.cost(&it, &window) + penalty * infeas0;
            let slope = self.cost_slope(&it, &dir, &window) - penalty * infeas0;

            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=BACKTRACKS {
                let trial = Iterate {
                    states: (0..=horizon).map(|i| &it.states[i] + &dir.states[i] * alpha).collect(),
                    inputs: (0..horizon).map(|i| &it.inputs[i] + &dir.inputs[i] * alpha).collect(),
                };
                // trials outside the model's domain are rejected
                let merit = match self.rollout_next(&trial) {
                    Ok(trial_next) => {
                        self.cost(&trial, &window) + penalty * self.infeasibility(&trial, &trial_next, &constraints)
                    }
                    Err(_) => f64::INFINITY,
                };
                let bound = if slope < 0.0 {
                    merit0 + ARMIJO * alpha * slope
                } else {
                    merit0 + 1e-12 * merit0.abs()
                };
                let last = alpha <= 0.5f64.powi(BACKTRACKS as i32);
                if merit <= bound || (last && merit.is_finite()) {
                    accepted = Some(trial);
                    break;
                }
                alpha *= 0.5;
            }
            let Some(next_it) = accepted else {
                break;
            };
            it = next_it;
            it.states[0] = x_meas.clone();

            if step_norm <= self.cfg.sqp_tol {
                converged = true;
                break;
            }
        }

        let u_applied = if feasible {
            self.cfg.clamp_input(&it.inputs[0])
        } else {
            self.cfg
                .clamp_input(self.prev_inputs.as_ref().map(|u| &u[0]).unwrap_or(&u_eq))
        };
        let objective = self.cost(&it, &window);
        let terminal_in_set = self
            .terminal
            .contains(&(&it.states[horizon] - &window.states[horizon]));
        self.prev_duals = warm_duals;
        self.prev_states = Some(it.states.clone());
        self.prev_inputs = Some(it.inputs.clone());

        Ok(ControlStepResult {
            u_applied,
            predicted_states: it.states,
            predicted_inputs: it.inputs,
            objective,
            qp_status: status,
            qp_iterations,
            sqp_iterations,
            converged,
            cpu_time: start.elapsed(),
            feasible,
            obstacle_active,
            terminal_in_set,
            candidate_objective,
            d_hat: None,
        })
    }

    fn reset(&mut self) {
        self.prev_states = None;
        self.prev_inputs = None;
        self.prev_duals = None;
        self.prev_normals.clear();
    }
}
