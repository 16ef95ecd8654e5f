//! Receding-horizon controllers and the condensed tracking QP they share.

mod nmpc;
mod sdc_mpc;

pub use nmpc::Nmpc;
pub use sdc_mpc::SdcMpc;

use std::time::Duration;

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::model::ModelError;
use crate::observer::ObserverError;
use crate::qp::{QpError, QpStatus, QuadraticProgram};
use crate::riccati::RiccatiError;
pub use crate::sdc::{discretize_affine, DiscreteModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpcError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Observer(#[from] ObserverError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("linearization point coincides with the obstacle center")]
    CenterCoincidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminalMode {
    #[default]
    CostOnly,
    /// Adds `w x'Px / alpha` for the terminal-set level `alpha`.
    CostPlusPenalty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub ts: f64,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub terminal_mode: TerminalMode,
    pub terminal_penalty_weight: f64,
    pub sqp_max_iters: usize,
    pub sqp_tol: f64,
    /// Shift of the offline terminal Lyapunov equation of the nonlinear controller.
    pub kappa: f64,
    /// Linear penalty on obstacle slacks when a subproblem must be relaxed.
    pub soft_penalty: f64,
    /// Steps over which the obstacle margin ramps from zero to its full value
    /// (0 applies the full margin at every step).
    pub margin_ramp_steps: usize,
}

impl Default for MpcConfig {
    /// Quadrotor tuning: 20 steps of 0.1 s.
    fn default() -> Self {
        Self {
            horizon: 20,
            ts: 0.1,
            q: DMatrix::from_diagonal(&DVector::from_vec(vec![
                50.0, 50.0, 80.0, 20.0, 20.0, 20.0, 10.0, 10.0, 10.0, 2.0, 2.0, 2.0,
            ])),
            r: DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.5, 0.5, 0.2])),
            u_min: DVector::from_vec(vec![0.0, -1.0, -1.0, -0.5]),
            u_max: DVector::from_vec(vec![20.0, 1.0, 1.0, 0.5]),
            terminal_mode: TerminalMode::CostOnly,
            terminal_penalty_weight: 0.0,
            sqp_max_iters: 20,
            sqp_tol: 1e-6,
            kappa: 0.1,
            soft_penalty: 1e4,
            margin_ramp_steps: 0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self, n: usize, m: usize) -> Result<(), MpcError> {
        let fail = |msg: String| Err(MpcError::Config(msg));
        if self.horizon == 0 {
            return fail("horizon must be at least 1".into());
        }
        if !(self.ts > 0.0) {
            return fail(format!("sampling time {} must be positive", self.ts));
        }
        if self.q.shape() != (n, n) || self.r.shape() != (m, m) {
            return fail(format!("weights {:?}/{:?} do not match n={n}, m={m}", self.q.shape(), self.r.shape()));
        }
        if self.u_min.len() != m || self.u_max.len() != m {
            return fail("input bounds do not match the input dimension".into());
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(lo, hi)| !(lo < hi)) {
            return fail("u_min must be below u_max".into());
        }
        if self.q.symmetric_eigenvalues().min() < -1e-12 {
            return fail("Q must be positive semidefinite".into());
        }
        if self.r.clone().cholesky().is_none() {
            return fail("R must be positive definite".into());
        }
        if self.terminal_penalty_weight < 0.0 || self.kappa < 0.0 {
            return fail("penalty weight and kappa must be nonnegative".into());
        }
        Ok(())
    }

    /// Distance from `u_op` to the nearest bound, per input.
    pub fn input_margins(&self, u_op: &DVector<f64>) -> Vec<f64> {
        (0..u_op.len())
            .map(|i| (u_op[i] - self.u_min[i]).min(self.u_max[i] - u_op[i]))
            .collect()
    }

    pub fn clamp_input(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.u_min[i], self.u_max[i]))
    }

    /// Terminal weight used in the cost for a terminal matrix `p` with level `alpha`.
    pub fn terminal_weight(&self, p: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
        match self.terminal_mode {
            TerminalMode::CostPlusPenalty if alpha.is_finite() && alpha > 0.0 => {
                p * (1.0 + self.terminal_penalty_weight / alpha)
            }
            _ => p.clone(),
        }
    }
}

/// Circular keep-out region in the horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleSpec {
    pub center: Vector2<f64>,
    pub radius: f64,
    pub inflation_margin: f64,
}

impl ObstacleSpec {
    pub fn distance(&self, p: &Vector2<f64>) -> f64 {
        (p - self.center).norm()
    }

    /// Margin applied at prediction step `step` (1-based).
    pub fn margin_at(&self, step: usize, ramp_steps: usize) -> f64 {
        if ramp_steps == 0 {
            self.inflation_margin
        } else {
            self.inflation_margin * (step as f64 / ramp_steps as f64).min(1.0)
        }
    }
}

/// `normal' p >= offset` in the horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Halfspace {
    pub normal: Vector2<f64>,
    pub offset: f64,
}

impl Halfspace {
    pub fn lift(&self, n: usize, positions: [usize; 2]) -> StateConstraint {
        let mut row = DVector::zeros(n);
        row[positions[0]] = self.normal.x;
        row[positions[1]] = self.normal.y;
        StateConstraint { row, lower: self.offset }
    }
}

/// `row' x >= lower` on one predicted state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateConstraint {
    pub row: DVector<f64>,
    pub lower: f64,
}

/// Tangent halfspace of the inflated circle at the radial projection of `p_prev`.
pub fn linearize_obstacle(p_prev: &Vector2<f64>, obs: &ObstacleSpec) -> Result<Halfspace, MpcError> {
    let diff = p_prev - obs.center;
    let dist = diff.norm();
    if dist < 1e-9 {
        return Err(MpcError::CenterCoincidence);
    }
    Ok(halfspace_from_normal(diff / dist, obs, obs.inflation_margin))
}

fn halfspace_from_normal(normal: Vector2<f64>, obs: &ObstacleSpec, margin: f64) -> Halfspace {
    Halfspace {
        normal,
        offset: normal.dot(&obs.center) + obs.radius + margin,
    }
}

/// Reference samples over one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    /// `N + 1` states, starting at the current time.
    pub states: Vec<DVector<f64>>,
    /// `N` nominal inputs.
    pub inputs: Vec<DVector<f64>>,
}

pub trait ReferenceProvider: Send + Sync {
    fn state(&self, t: f64) -> DVector<f64>;
}

/// Constant reference.
impl ReferenceProvider for DVector<f64> {
    fn state(&self, _t: f64) -> DVector<f64> {
        self.clone()
    }
}

pub fn reference_window(
    provider: &dyn ReferenceProvider,
    t: f64,
    cfg: &MpcConfig,
    u_nominal: &DVector<f64>,
) -> ReferenceWindow {
    ReferenceWindow {
        states: (0..=cfg.horizon).map(|i| provider.state(t + i as f64 * cfg.ts)).collect(),
        inputs: vec![u_nominal.clone(); cfg.horizon],
    }
}

/// Condensed tracking problem over the stacked inputs `U = [u_0; ...; u_{N-1}]`.
/// Predicted states are `x_i = gamma_i U + free_i` for `i = 1..N`, and the
/// tracking cost equals `qp.objective(U) + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingQp {
    pub qp: QuadraticProgram,
    pub gamma: DMatrix<f64>,
    pub free: DVector<f64>,
    pub constant: f64,
    /// Prediction step (1-based) of every general constraint row.
    pub row_steps: Vec<usize>,
    pub x0: DVector<f64>,
}

impl TrackingQp {
    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn horizon(&self) -> usize {
        self.free.len() / self.state_dim()
    }

    /// `x_0 .. x_N` for the input sequence `u`.
    pub fn trajectory(&self, u: &DVector<f64>) -> Vec<DVector<f64>> {
        let n = self.state_dim();
        let stacked = &self.gamma * u + &self.free;
        let mut out = Vec::with_capacity(self.horizon() + 1);
        out.push(self.x0.clone());
        out.extend((0..self.horizon()).map(|i| stacked.rows(i * n, n).into_owned()));
        out
    }

    pub fn cost(&self, u: &DVector<f64>) -> f64 {
        self.qp.objective(u) + self.constant
    }

    /// Whether `u` satisfies bounds and rows to within `tol`.
    pub fn is_feasible(&self, u: &DVector<f64>, tol: f64) -> bool {
        let within = |v: f64, lo: f64, hi: f64| v >= lo - tol && v <= hi + tol;
        let bounds_ok = (0..u.len()).all(|j| within(u[j], self.qp.lower[j], self.qp.upper[j]));
        let au = &self.qp.constraint_matrix * u;
        bounds_ok
            && (0..au.len()).all(|i| within(au[i], self.qp.constraint_lower[i], self.qp.constraint_upper[i]))
    }

    /// Rows within `tol` of their lower bound at `u`.
    pub fn active_rows(&self, u: &DVector<f64>, tol: f64) -> usize {
        let au = &self.qp.constraint_matrix * u;
        (0..au.len())
            .filter(|&i| au[i] - self.qp.constraint_lower[i] <= tol)
            .count()
    }

    /// Appends one nonnegative slack per general row, penalized linearly.
    pub fn soften(&self, penalty: f64) -> QuadraticProgram {
        let d = self.qp.dim();
        let rows = self.qp.num_constraints();
        let total = d + rows;
        let mut h = DMatrix::zeros(total, total);
        h.view_mut((0, 0), (d, d)).copy_from(&self.qp.hessian);
        let mut g = DVector::zeros(total);
        g.rows_mut(0, d).copy_from(&self.qp.gradient);
        g.rows_mut(d, rows).fill(penalty);
        let mut a = DMatrix::zeros(rows, total);
        a.view_mut((0, 0), (rows, d)).copy_from(&self.qp.constraint_matrix);
        for i in 0..rows {
            a[(i, d + i)] = 1.0;
        }
        let mut lower = DVector::zeros(total);
        lower.rows_mut(0, d).copy_from(&self.qp.lower);
        let mut upper = DVector::from_element(total, f64::INFINITY);
        upper.rows_mut(0, d).copy_from(&self.qp.upper);
        QuadraticProgram::new(h, g).with_bounds(lower, upper).with_constraints(
            a,
            self.qp.constraint_lower.clone(),
            self.qp.constraint_upper.clone(),
        )
    }
}

/// Builds the condensed tracking QP
///
/// ```text
/// sum_{i<N} |x_i - r_i|_Q^2 + |u_i|_R^2  +  |x_N - r_N|_P^2
/// ```
///
/// subject to `x_{i+1} = A_i x_i + B_i u_i + c_i + E_i d_hat`, input bounds
/// and `constraints[i-1]` on `x_i` for `i = 1..N`.
pub fn build_tracking_qp(
    models: &[DiscreteModel],
    reference: &ReferenceWindow,
    cfg: &MpcConfig,
    x0: &DVector<f64>,
    constraints: &[Vec<StateConstraint>],
    p_terminal: &DMatrix<f64>,
    d_hat: Option<&DVector<f64>>,
) -> Result<TrackingQp, MpcError> {
    let horizon = cfg.horizon;
    let n = x0.len();
    let m = cfg.r.nrows();
    let dim = horizon * m;
    if models.len() != horizon || reference.states.len() != horizon + 1 {
        return Err(MpcError::Config(format!(
            "{} models and {} reference states for horizon {horizon}",
            models.len(),
            reference.states.len()
        )));
    }
    if !constraints.is_empty() && constraints.len() != horizon {
        return Err(MpcError::Config("constraints must be given per step or not at all".into()));
    }
    if p_terminal.shape() != (n, n) || cfg.q.shape() != (n, n) {
        return Err(MpcError::Config("weight dimensions do not match the state".into()));
    }
    if models.iter().any(|md| md.a.shape() != (n, n) || md.b.shape() != (n, m) || md.c.len() != n) {
        return Err(MpcError::Config("model dimensions do not match the state and input".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(MpcError::Config("initial state is not finite".into()));
    }

    let mut gamma = DMatrix::zeros(horizon * n, dim);
    let mut free = DVector::zeros(horizon * n);
    let mut hessian = DMatrix::zeros(dim, dim);
    let mut gradient = DVector::zeros(dim);
    let err0 = x0 - &reference.states[0];
    let mut constant = err0.dot(&(&cfg.q * &err0));

    let mut s_prev = DMatrix::<f64>::zeros(n, dim);
    let mut f_prev = x0.clone();
    for i in 0..horizon {
        let md = &models[i];
        let cols = (i + 1) * m;
        // S_{i+1} = A_i S_i + [0 .. B_i .. 0]
        let mut s = DMatrix::zeros(n, dim);
        if i > 0 {
            let prev = s_prev.columns(0, i * m);
            s.columns_mut(0, i * m).copy_from(&(&md.a * prev));
        }
        s.columns_mut(i * m, m).copy_from(&md.b);
        let mut f = &md.a * &f_prev + &md.c;
        if let Some(d) = d_hat {
            f += &md.e * d;
        }

        let weight = if i + 1 == horizon { p_terminal } else { &cfg.q };
        let s_used = s.columns(0, cols);
        let ws = weight * &s_used;
        hessian
            .view_mut((0, 0), (cols, cols))
            .gemm_tr(2.0, &s_used, &ws, 1.0);
        let err = &f - &reference.states[i + 1];
        let wf = weight * &err;
        let mut g_part = gradient.rows_mut(0, cols);
        g_part.gemv_tr(2.0, &s_used, &wf, 1.0);
        constant += err.dot(&wf);

        gamma.view_mut((i * n, 0), (n, dim)).copy_from(&s);
        free.rows_mut(i * n, n).copy_from(&f);
        s_prev = s;
        f_prev = f;
    }
    for i in 0..horizon {
        let mut block = hessian.view_mut((i * m, i * m), (m, m));
        block += &cfg.r * 2.0;
    }
    // exact symmetry for the solver's check
    let hessian = (&hessian + hessian.transpose()) * 0.5;

    let mut rows = Vec::new();
    let mut lower = Vec::new();
    let mut row_steps = Vec::new();
    for (i, step) in constraints.iter().enumerate() {
        let s = gamma.view((i * n, 0), (n, dim));
        let f = free.rows(i * n, n);
        for c in step {
            rows.push((c.row.transpose() * s).into_owned());
            lower.push(c.lower - c.row.dot(&f));
            row_steps.push(i + 1);
        }
    }
    let a = if rows.is_empty() {
        DMatrix::zeros(0, dim)
    } else {
        DMatrix::from_rows(&rows)
    };
    let count = lower.len();
    let lb = DVector::from_fn(dim, |j, _| cfg.u_min[j % m]);
    let ub = DVector::from_fn(dim, |j, _| cfg.u_max[j % m]);
    let qp = QuadraticProgram::new(hessian, gradient).with_bounds(lb, ub).with_constraints(
        a,
        DVector::from_vec(lower),
        DVector::from_element(count, f64::INFINITY),
    );
    Ok(TrackingQp {
        qp,
        gamma,
        free,
        constant,
        row_steps,
        x0: x0.clone(),
    })
}

/// Outcome of one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlStepResult {
    pub u_applied: DVector<f64>,
    /// `x_0 .. x_N`.
    pub predicted_states: Vec<DVector<f64>>,
    pub predicted_inputs: Vec<DVector<f64>>,
    pub objective: f64,
    pub qp_status: QpStatus,
    /// Interior-point iterations summed over all subproblems of this step.
    pub qp_iterations: usize,
    pub sqp_iterations: usize,
    pub converged: bool,
    pub cpu_time: Duration,
    pub feasible: bool,
    pub obstacle_active: bool,
    pub terminal_in_set: bool,
    /// Cost of the shifted previous solution with the terminal-law tail, when
    /// that candidate is feasible for this step's problem.
    pub candidate_objective: Option<f64>,
    pub d_hat: Option<DVector<f64>>,
}

impl ControlStepResult {
    pub fn cpu_seconds(&self) -> f64 {
        self.cpu_time.as_secs_f64()
    }
}

pub trait Controller: Send {
    fn name(&self) -> &'static str;

    fn step(
        &mut self,
        x_meas: &DVector<f64>,
        t: f64,
        reference: &dyn ReferenceProvider,
    ) -> Result<ControlStepResult, MpcError>;

    fn reset(&mut self);
}

fn stack(inputs: &[DVector<f64>]) -> DVector<f64> {
    let m = inputs.first().map_or(0, |u| u.len());
    DVector::from_fn(inputs.len() * m, |j, _| inputs[j / m][j % m])
}

fn unstack(u: &DVector<f64>, m: usize) -> Vec<DVector<f64>> {
    (0..u.len() / m).map(|i| u.rows(i * m, m).into_owned()).collect()
}

fn position(x: &DVector<f64>, idx: [usize; 2]) -> Vector2<f64> {
    Vector2::new(x[idx[0]], x[idx[1]])
}

/// Obstacle halfspaces per prediction step, linearized at `points[i]` for
/// step `i + 1`. Falls back to `previous` normals, then to the direction of
/// `fallback_points`, when a point sits on the center.
fn obstacle_constraints(
    obs: &ObstacleSpec,
    cfg: &MpcConfig,
    n: usize,
    positions: [usize; 2],
    points: &[DVector<f64>],
    previous: &mut Vec<Option<Vector2<f64>>>,
    fallback_points: &[DVector<f64>],
) -> Vec<Vec<StateConstraint>> {
    previous.resize(cfg.horizon, None);
    (0..cfg.horizon)
        .map(|i| {
            let margin = obs.margin_at(i + 1, cfg.margin_ramp_steps);
            let diff = position(&points[i], positions) - obs.center;
            let normal = if diff.norm() >= 1e-9 {
                diff.normalize()
            } else if let Some(prev) = previous[i] {
                prev
            } else {
                let alt = position(&fallback_points[i], positions) - obs.center;
                if alt.norm() >= 1e-9 {
                    alt.normalize()
                } else {
                    Vector2::x()
                }
            };
            previous[i] = Some(normal);
            vec![halfspace_from_normal(normal, obs, margin).lift(n, positions)]
        })
        .collect()
}

#[cfg(test)]
mod tests;
