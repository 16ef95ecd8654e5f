//! Dense convex quadratic programming.
//!
//! ```text
//!     minimize    1/2 x' H x + g' x
//!     subject to  l <= A x <= u
//!                 lb <= x <= ub
//! ```
//!
//! Solved with a primal-dual interior-point method using Mehrotra's
//! predictor-corrector. Rows with `l == u` are kept as equalities. After
//! convergence the active set guessed from the slacks is used to polish the
//! iterate with one equality-constrained KKT solve.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Hessian is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("Hessian is not positive semidefinite")]
    NotConvex,
    #[error("problem data contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub constraint_matrix: DMatrix<f64>,
    pub constraint_lower: DVector<f64>,
    pub constraint_upper: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QuadraticProgram {
    /// Unconstrained problem.
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let d = gradient.len();
        Self {
            hessian,
            gradient,
            constraint_matrix: DMatrix::zeros(0, d),
            constraint_lower: DVector::zeros(0),
            constraint_upper: DVector::zeros(0),
            lower: DVector::from_element(d, f64::NEG_INFINITY),
            upper: DVector::from_element(d, f64::INFINITY),
        }
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_constraints(mut self, a: DMatrix<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.constraint_matrix = a;
        self.constraint_lower = lower;
        self.constraint_upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraint_matrix.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }

    /// Checks dimensions, symmetry and (with a small shift) positive semidefiniteness.
    pub fn validate(&self) -> Result<(), QpError> {
        let d = self.dim();
        let q = self.num_constraints();
        if self.hessian.shape() != (d, d)
            || self.lower.len() != d
            || self.upper.len() != d
            || self.constraint_matrix.ncols() != d
            || self.constraint_lower.len() != q
            || self.constraint_upper.len() != q
        {
            return Err(QpError::Dimension(format!(
                "H {:?}, g {}, A {:?}, l {}, u {}, lb {}, ub {}",
                self.hessian.shape(),
                d,
                self.constraint_matrix.shape(),
                self.constraint_lower.len(),
                self.constraint_upper.len(),
                self.lower.len(),
                self.upper.len()
            )));
        }
        if self.hessian.iter().chain(self.gradient.iter()).chain(self.constraint_matrix.iter()).any(|v| !v.is_finite())
            || self.lower.iter().chain(self.constraint_lower.iter()).any(|v| v.is_nan() || *v == f64::INFINITY)
            || self.upper.iter().chain(self.constraint_upper.iter()).any(|v| v.is_nan() || *v == f64::NEG_INFINITY)
        {
            return Err(QpError::NonFinite);
        }
        let scale = 1.0 + self.hessian.amax();
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(QpError::NotSymmetric(asym));
        }
        if d > 0 {
            let shifted = &self.hessian + DMatrix::identity(d, d) * (1e-9 * scale);
            if Cholesky::new(shifted).is_none() {
                return Err(QpError::NotConvex);
            }
        }
        Ok(())
    }
}

/// Signed multipliers: positive entries belong to an upper side, negative to
/// a lower side. Stationarity reads `H x + g + A' y + w = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpDuals {
    pub constraints: DVector<f64>,
    pub bounds: DVector<f64>,
}

impl QpDuals {
    pub fn zeros(qp: &QuadraticProgram) -> Self {
        Self {
            constraints: DVector::zeros(qp.num_constraints()),
            bounds: DVector::zeros(qp.dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub duals: QpDuals,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub solve_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub duals: Option<QpDuals>,
}

impl WarmStart {
    pub fn primal(x: DVector<f64>) -> Self {
        Self { x, duals: None }
    }
}

/// Absolute KKT residual required for [`QpStatus::Optimal`].
pub const OPTIMAL_KKT: f64 = 1e-6;
const REFINEMENT_STEPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub regularization: f64,
    pub infeasibility_tolerance: f64,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 50,
            regularization: 1e-9,
            infeasibility_tolerance: 1e-6,
            polish: true,
        }
    }
}

/// Max-norm of the stationarity, primal infeasibility and complementarity
/// violations of `(x, duals)`.
pub fn kkt_residual(qp: &QuadraticProgram, x: &DVector<f64>, duals: &QpDuals) -> f64 {
    let ax = &qp.constraint_matrix * x;
    let stationarity = &qp.hessian * x
        + &qp.gradient
        + qp.constraint_matrix.tr_mul(&duals.constraints)
        + &duals.bounds;
    let mut worst = stationarity.amax();
    let mut side = |value: f64, lo: f64, hi: f64, dual: f64| {
        let violation = (lo - value).max(value - hi).max(0.0);
        let comp = if dual > 0.0 {
            if hi.is_finite() {
                dual * (hi - value).abs()
            } else {
                dual
            }
        } else if dual < 0.0 {
            if lo.is_finite() {
                -dual * (value - lo).abs()
            } else {
                -dual
            }
        } else {
            0.0
        };
        worst = worst.max(violation).max(comp);
    };
    for i in 0..qp.num_constraints() {
        side(ax[i], qp.constraint_lower[i], qp.constraint_upper[i], duals.constraints[i]);
    }
    for j in 0..qp.dim() {
        side(x[j], qp.lower[j], qp.upper[j], duals.bounds[j]);
    }
    worst
}

/// Inequality rows in the form `G x <= h`, with the unit rows of variable
/// bounds stored implicitly.
struct Standardized {
    d: usize,
    /// (constraint row, +1 upper / -1 lower)
    general: Vec<(usize, f64)>,
    g_general: DMatrix<f64>,
    /// (variable, +1 upper / -1 lower)
    bounds: Vec<(usize, f64)>,
    h: DVector<f64>,
    /// equality rows: constraint row or variable index
    eq_rows: Vec<EqRow>,
    e: DMatrix<f64>,
    f: DVector<f64>,
}

#[derive(Clone, Copy)]
enum EqRow {
    Constraint(usize),
    Bound(usize),
}

fn is_equal(lo: f64, hi: f64) -> bool {
    lo.is_finite() && hi.is_finite() && (hi - lo).abs() <= 1e-12 * (1.0 + lo.abs())
}

impl Standardized {
    fn new(qp: &QuadraticProgram) -> Self {
        let d = qp.dim();
        let mut general = Vec::new();
        let mut eq_rows = Vec::new();
        let mut h = Vec::new();
        for i in 0..qp.num_constraints() {
            let (lo, hi) = (qp.constraint_lower[i], qp.constraint_upper[i]);
            if is_equal(lo, hi) {
                eq_rows.push(EqRow::Constraint(i));
                continue;
            }
            if hi.is_finite() {
                general.push((i, 1.0));
                h.push(hi);
            }
            if lo.is_finite() {
                general.push((i, -1.0));
                h.push(-lo);
            }
        }
        let mut bounds = Vec::new();
        for j in 0..d {
            let (lo, hi) = (qp.lower[j], qp.upper[j]);
            if is_equal(lo, hi) {
                eq_rows.push(EqRow::Bound(j));
                continue;
            }
            if hi.is_finite() {
                bounds.push((j, 1.0));
                h.push(hi);
            }
            if lo.is_finite() {
                bounds.push((j, -1.0));
                h.push(-lo);
            }
        }
        let mut g_general = DMatrix::zeros(general.len(), d);
        for (k, &(row, sign)) in general.iter().enumerate() {
            g_general.set_row(k, &(qp.constraint_matrix.row(row) * sign));
        }
        let mut e = DMatrix::zeros(eq_rows.len(), d);
        let mut f = DVector::zeros(eq_rows.len());
        for (k, row) in eq_rows.iter().enumerate() {
            match *row {
                EqRow::Constraint(i) => {
                    e.set_row(k, &qp.constraint_matrix.row(i));
                    f[k] = qp.constraint_lower[i];
                }
                EqRow::Bound(j) => {
                    e[(k, j)] = 1.0;
                    f[k] = qp.lower[j];
                }
            }
        }
        Self {
            d,
            general,
            g_general,
            bounds,
            h: DVector::from_vec(h),
            eq_rows,
            e,
            f,
        }
    }

    fn m(&self) -> usize {
        self.general.len() + self.bounds.len()
    }

    fn g_times(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m());
        let mg = self.general.len();
        if mg > 0 {
            out.rows_mut(0, mg).copy_from(&(&self.g_general * x));
        }
        for (k, &(j, sign)) in self.bounds.iter().enumerate() {
            out[mg + k] = sign * x[j];
        }
        out
    }

    fn gt_times(&self, z: &DVector<f64>) -> DVector<f64> {
        let mg = self.general.len();
        let mut out = if mg > 0 {
            self.g_general.tr_mul(&z.rows(0, mg))
        } else {
            DVector::zeros(self.d)
        };
        for (k, &(j, sign)) in self.bounds.iter().enumerate() {
            out[j] += sign * z[mg + k];
        }
        out
    }

    /// Converts `G x <= h` multipliers back to signed per-row duals.
    fn signed_duals(&self, qp: &QuadraticProgram, z: &DVector<f64>, y: &DVector<f64>) -> QpDuals {
        let mut duals = QpDuals::zeros(qp);
        let mg = self.general.len();
        for (k, &(row, sign)) in self.general.iter().enumerate() {
            duals.constraints[row] += sign * z[k];
        }
        for (k, &(j, sign)) in self.bounds.iter().enumerate() {
            duals.bounds[j] += sign * z[mg + k];
        }
        for (k, row) in self.eq_rows.iter().enumerate() {
            match *row {
                EqRow::Constraint(i) => duals.constraints[i] += y[k],
                EqRow::Bound(j) => duals.bounds[j] += y[k],
            }
        }
        duals
    }

    /// Inverse of [`Self::signed_duals`] for warm starts.
    fn split_duals(&self, duals: &QpDuals) -> (DVector<f64>, DVector<f64>) {
        let mg = self.general.len();
        let mut z = DVector::zeros(self.m());
        for (k, &(row, sign)) in self.general.iter().enumerate() {
            z[k] = (sign * duals.constraints[row]).max(0.0);
        }
        for (k, &(j, sign)) in self.bounds.iter().enumerate() {
            z[mg + k] = (sign * duals.bounds[j]).max(0.0);
        }
        let y = DVector::from_iterator(
            self.eq_rows.len(),
            self.eq_rows.iter().map(|row| match *row {
                EqRow::Constraint(i) => duals.constraints[i],
                EqRow::Bound(j) => duals.bounds[j],
            }),
        );
        (z, y)
    }
}

/// Factorized Newton system for one interior-point iteration.
struct NewtonSystem {
    chol: Cholesky<f64, Dyn>,
    /// diagonal shift added to the reduced matrix before factoring
    reg: f64,
    /// `M^-1 E'` and the Cholesky factor of `E M^-1 E'` when equalities exist
    eq: Option<(DMatrix<f64>, Cholesky<f64, Dyn>)>,
}

struct Direction {
    dx: DVector<f64>,
    ds: DVector<f64>,
    dz: DVector<f64>,
    dy: DVector<f64>,
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha: f64 = 1.0;
    for (a, b) in v.iter().zip(dv.iter()) {
        if *b < 0.0 {
            alpha = alpha.min(-a / b);
        }
    }
    alpha
}

/// Dense primal-dual interior-point solver. Holds its settings and reusable
/// buffers; use one instance per thread.
#[derive(Debug, Clone)]
pub struct QpSolver {
    pub settings: QpSettings,
    newton: DMatrix<f64>,
}

impl Default for QpSolver {
    fn default() -> Self {
        Self::new(QpSettings::default())
    }
}

struct Iterate {
    x: DVector<f64>,
    s: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
}

struct Residuals {
    dual: DVector<f64>,
    primal: DVector<f64>,
    eq: DVector<f64>,
    gap: f64,
    scaled: f64,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self {
            settings,
            newton: DMatrix::zeros(0, 0),
        }
    }

    pub fn solve(&mut self, qp: &QuadraticProgram, warm: Option<&WarmStart>) -> Result<QpSolution, QpError> {
        let start = Instant::now();
        qp.validate()?;
        if let Some(w) = warm {
            if w.x.len() != qp.dim() {
                return Err(QpError::Dimension(format!(
                    "warm start has {} entries, expected {}",
                    w.x.len(),
                    qp.dim()
                )));
            }
        }
        let mut solution = self.solve_validated(qp, warm, true);
        solution.solve_time = start.elapsed();
        Ok(solution)
    }

    fn infeasible(&self, qp: &QuadraticProgram, x: DVector<f64>, iterations: usize) -> QpSolution {
        let duals = QpDuals::zeros(qp);
        QpSolution {
            objective: qp.objective(&x),
            kkt_residual: kkt_residual(qp, &x, &duals),
            x,
            duals,
            status: QpStatus::Infeasible,
            iterations,
            solve_time: Duration::ZERO,
        }
    }

    fn solve_validated(&mut self, qp: &QuadraticProgram, warm: Option<&WarmStart>, allow_phase_one: bool) -> QpSolution {
        let d = qp.dim();
        let crossed = (0..d).any(|j| qp.lower[j] > qp.upper[j] + 1e-12 * (1.0 + qp.lower[j].abs()))
            || (0..qp.num_constraints()).any(|i| {
                qp.constraint_lower[i] > qp.constraint_upper[i] + 1e-12 * (1.0 + qp.constraint_lower[i].abs())
            });
        if crossed {
            let x = warm.map(|w| w.x.clone()).unwrap_or_else(|| DVector::zeros(d));
            return self.infeasible(qp, x, 0);
        }

        let std = Standardized::new(qp);
        let m = std.m();
        let scale_h = 1.0 + qp.hessian.amax();
        let scale_g = 1.0 + qp.gradient.amax();
        let scale_b = 1.0 + std.h.amax().max(std.f.amax());

        let mut it = self.initial_point(qp, &std, warm);
        let mut iterations = 0;
        let mut converged = false;
        let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>)> = None;
        let mut stalled = 0;

        loop {
            let res = self.residuals(qp, &std, &it, scale_g, scale_b);
            if !res.scaled.is_finite() {
                break;
            }
            if best.as_ref().map_or(true, |b| res.scaled < b.0) {
                best = Some((res.scaled, it.x.clone(), it.z.clone(), it.y.clone()));
            }
            // large objectives make the relative gap loose; also require an
            // absolute residual below the optimality threshold
            if res.scaled <= self.settings.tolerance
                && kkt_residual(qp, &it.x, &std.signed_duals(qp, &it.z, &it.y)) <= OPTIMAL_KKT
            {
                converged = true;
                break;
            }
            if iterations >= self.settings.max_iterations || stalled >= 5 {
                break;
            }
            iterations += 1;

            let w = it.z.component_div(&it.s);
            let Some(system) = self.factor(qp, &std, &w, scale_h) else {
                break;
            };
            if m == 0 {
                let dir = self.direction(&std, &system, &it, &res, &DVector::zeros(0));
                it.x += dir.dx;
                it.y += dir.dy;
                continue;
            }
            let mu = res.gap / m as f64;
            let sz = it.s.component_mul(&it.z);
            let aff = self.direction(&std, &system, &it, &res, &sz);
            let alpha_aff = max_step(&it.s, &aff.ds).min(max_step(&it.z, &aff.dz));
            let mu_aff = (&it.s + &aff.ds * alpha_aff).dot(&(&it.z + &aff.dz * alpha_aff)) / m as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
            let rc = sz + aff.ds.component_mul(&aff.dz) - DVector::from_element(m, sigma * mu);
            let dir = self.direction(&std, &system, &it, &res, &rc);
            let alpha = (0.99 * max_step(&it.s, &dir.ds).min(max_step(&it.z, &dir.dz))).min(1.0);
            if alpha < 1e-10 {
                stalled += 1;
            } else {
                stalled = 0;
            }
            it.x.axpy(alpha, &dir.dx, 1.0);
            it.s.axpy(alpha, &dir.ds, 1.0);
            it.z.axpy(alpha, &dir.dz, 1.0);
            it.y.axpy(alpha, &dir.dy, 1.0);
            // keep strictly interior after rounding
            it.s.apply(|v| *v = v.max(1e-300));
            it.z.apply(|v| *v = v.max(1e-300));
        }

        if !converged {
            if allow_phase_one && m + std.eq_rows.len() > 0 && self.is_infeasible(qp) {
                let x = best.map(|b| b.1).unwrap_or(it.x);
                return self.infeasible(qp, x, iterations);
            }
            if let Some((_, x, z, y)) = best {
                it.x = x;
                it.z = z;
                it.y = y;
            }
        }

        let mut x = it.x.clone();
        let mut duals = std.signed_duals(qp, &it.z, &it.y);
        let mut kkt = kkt_residual(qp, &x, &duals);
        if self.settings.polish && converged {
            if let Some((px, pd)) = self.polish(qp, &std, &it) {
                let pk = kkt_residual(qp, &px, &pd);
                if pk <= kkt {
                    x = px;
                    duals = pd;
                    kkt = pk;
                }
            }
        }
        let status = if converged && kkt <= OPTIMAL_KKT {
            QpStatus::Optimal
        } else {
            QpStatus::MaxIterations
        };
        QpSolution {
            objective: qp.objective(&x),
            x,
            duals,
            status,
            kkt_residual: kkt,
            iterations,
            solve_time: Duration::ZERO,
        }
    }

    fn residuals(
        &self,
        qp: &QuadraticProgram,
        std: &Standardized,
        it: &Iterate,
        scale_g: f64,
        scale_b: f64,
    ) -> Residuals {
        let hx = &qp.hessian * &it.x;
        let gtz = std.gt_times(&it.z);
        let mut dual = &hx + &qp.gradient + &gtz;
        if !std.eq_rows.is_empty() {
            dual += std.e.tr_mul(&it.y);
        }
        let gx = std.g_times(&it.x);
        let primal = &gx + &it.s - &std.h;
        let eq = if std.eq_rows.is_empty() {
            DVector::zeros(0)
        } else {
            &std.e * &it.x - &std.f
        };
        let gap = it.s.dot(&it.z);
        let obj = 0.5 * it.x.dot(&hx) + qp.gradient.dot(&it.x);
        let dual_scale = scale_g.max(hx.amax()).max(gtz.amax());
        let scaled = (dual.amax() / dual_scale)
            .max(primal.amax() / scale_b.max(gx.amax()))
            .max(eq.amax() / scale_b)
            .max(gap / (1.0 + obj.abs()));
        Residuals {
            dual,
            primal,
            eq,
            gap,
            scaled,
        }
    }

    fn initial_point(&mut self, qp: &QuadraticProgram, std: &Standardized, warm: Option<&WarmStart>) -> Iterate {
        let d = qp.dim();
        let m = std.m();
        let scale_g = 1.0 + qp.gradient.amax();
        let scale_b = 1.0 + std.h.amax().max(std.f.amax());

        // a primal-dual warm start is only kept when it is already converged;
        // otherwise its poor centering costs more than it saves
        if let Some((wx, duals)) = warm.and_then(|w| w.duals.as_ref().map(|d| (&w.x, d))) {
            let (z, y) = std.split_duals(duals);
            let floor = 1e-9;
            let it = Iterate {
                x: wx.clone(),
                s: (&std.h - std.g_times(wx)).map(|v| v.max(floor)),
                z: z.map(|v| v.max(floor)),
                y,
            };
            if self.residuals(qp, std, &it, scale_g, scale_b).scaled <= self.settings.tolerance {
                return it;
            }
        }

        let mut x = warm.map(|w| w.x.clone()).unwrap_or_else(|| DVector::zeros(d));
        for j in 0..d {
            let (lo, hi) = (qp.lower[j], qp.upper[j]);
            if lo.is_finite() && hi.is_finite() && lo < hi {
                let margin = (1e-3 * (hi - lo)).min(1e-2);
                x[j] = x[j].clamp(lo + margin, hi - margin);
            } else if lo.is_finite() && !is_equal(lo, hi) {
                x[j] = x[j].max(lo + 1e-2);
            } else if hi.is_finite() && !is_equal(lo, hi) {
                x[j] = x[j].min(hi - 1e-2);
            }
        }
        let slack = &std.h - std.g_times(&x);
        let y0 = DVector::zeros(std.eq_rows.len());

        let mut it = Iterate {
            x,
            s: slack.map(|v| v.max(1.0)),
            z: DVector::from_element(m, 1.0),
            y: y0,
        };
        if m == 0 {
            return it;
        }
        // shift an affine-scaling step back into the interior
        let res = self.residuals(qp, std, &it, scale_g, scale_b);
        let w = it.z.component_div(&it.s);
        if let Some(system) = self.factor(qp, std, &w, 1.0 + qp.hessian.amax()) {
            let sz = it.s.component_mul(&it.z);
            let aff = self.direction(std, &system, &it, &res, &sz);
            let candidate_x = &it.x + &aff.dx;
            if candidate_x.iter().all(|v| v.is_finite()) {
                it.x = candidate_x;
                it.s = (&it.s + &aff.ds).map(|v| v.abs().max(1.0));
                it.z = (&it.z + &aff.dz).map(|v| v.abs().max(1.0));
                it.y += aff.dy;
            }
        }
        it
    }

    fn factor(&mut self, qp: &QuadraticProgram, std: &Standardized, w: &DVector<f64>, scale_h: f64) -> Option<NewtonSystem> {
        let d = qp.dim();
        let mg = std.general.len();
        let mut reg = self.settings.regularization * scale_h;
        for _ in 0..6 {
            self.newton.clone_from(&qp.hessian);
            for j in 0..d {
                self.newton[(j, j)] += reg;
            }
            if mg > 0 {
                let mut scaled = std.g_general.clone();
                for k in 0..mg {
                    let sw = w[k].sqrt();
                    scaled.row_mut(k).scale_mut(sw);
                }
                self.newton.gemm_tr(1.0, &scaled, &scaled, 1.0);
            }
            for (k, &(j, _)) in std.bounds.iter().enumerate() {
                self.newton[(j, j)] += w[mg + k];
            }
            if let Some(chol) = Cholesky::new(self.newton.clone()) {
                if std.eq_rows.is_empty() {
                    return Some(NewtonSystem { chol, reg, eq: None });
                }
                let m_inv_et = chol.solve(&std.e.transpose());
                let mut schur = &std.e * &m_inv_et;
                let eq_reg = 1e-12 * (1.0 + schur.amax());
                for k in 0..schur.nrows() {
                    schur[(k, k)] += eq_reg;
                }
                if let Some(schur_chol) = Cholesky::new(schur) {
                    return Some(NewtonSystem {
                        chol,
                        reg,
                        eq: Some((m_inv_et, schur_chol)),
                    });
                }
            }
            reg = (reg * 100.0).max(1e-12);
        }
        None
    }

    /// Newton direction for complementarity target `s o z = rc` (i.e. residual `rc`).
    fn direction(
        &self,
        std: &Standardized,
        system: &NewtonSystem,
        it: &Iterate,
        res: &Residuals,
        rc: &DVector<f64>,
    ) -> Direction {
        let m = std.m();
        let correction = if m > 0 {
            std.gt_times(&(it.z.component_mul(&res.primal) - rc).component_div(&it.s))
        } else {
            DVector::zeros(std.d)
        };
        let rhs = -&res.dual - correction;
        let eq_rhs = -&res.eq;
        let (mut dx, mut dy) = Self::solve_reduced(std, system, &rhs, &eq_rhs);
        // refine against the unshifted matrix to undo the regularization bias
        for _ in 0..REFINEMENT_STEPS {
            let mut r = &rhs - (&self.newton * &dx - &dx * system.reg);
            let mut r_eq = eq_rhs.clone();
            if !std.eq_rows.is_empty() {
                r -= std.e.tr_mul(&dy);
                r_eq -= &std.e * &dx;
            }
            let (cx, cy) = Self::solve_reduced(std, system, &r, &r_eq);
            dx += cx;
            dy += cy;
        }
        if m == 0 {
            return Direction {
                dx,
                ds: DVector::zeros(0),
                dz: DVector::zeros(0),
                dy,
            };
        }
        let ds = -&res.primal - std.g_times(&dx);
        let dz = (-rc - it.z.component_mul(&ds)).component_div(&it.s);
        Direction { dx, ds, dz, dy }
    }

    /// Solves `[M E'; E 0] (dx, dy) = (rhs, eq_rhs)` with the factored `M`.
    fn solve_reduced(
        std: &Standardized,
        system: &NewtonSystem,
        rhs: &DVector<f64>,
        eq_rhs: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        match &system.eq {
            None => (system.chol.solve(rhs), DVector::zeros(0)),
            Some((m_inv_et, schur)) => {
                let m_inv_rhs = system.chol.solve(rhs);
                let dy = schur.solve(&(&std.e * &m_inv_rhs - eq_rhs));
                let dx = m_inv_rhs - m_inv_et * &dy;
                (dx, dy)
            }
        }
    }

    /// Elastic phase one: minimize total constraint violation.
    fn is_infeasible(&mut self, qp: &QuadraticProgram) -> bool {
        let d = qp.dim();
        let q = qp.num_constraints();
        let bounded: Vec<usize> = (0..d)
            .filter(|&j| qp.lower[j].is_finite() || qp.upper[j].is_finite())
            .collect();
        let nt = q + bounded.len();
        let n = d + nt;
        let mut h = DMatrix::zeros(n, n);
        for j in 0..d {
            h[(j, j)] = 1e-6;
        }
        let mut g = DVector::zeros(n);
        g.rows_mut(d, nt).fill(1.0);
        let rows = nt * 2;
        let mut a = DMatrix::zeros(rows, n);
        let mut lo = DVector::from_element(rows, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(rows, f64::INFINITY);
        let mut r = 0;
        let mut add = |a: &mut DMatrix<f64>, coeffs: &[(usize, f64)], t: usize, l: f64, u: f64| {
            // coeffs' x - t <= u  and  coeffs' x + t >= l
            for &(c, v) in coeffs {
                a[(r, c)] = v;
                a[(r + 1, c)] = v;
            }
            a[(r, t)] = -1.0;
            a[(r + 1, t)] = 1.0;
            hi[r] = u;
            lo[r + 1] = l;
            r += 2;
        };
        for i in 0..q {
            let coeffs: Vec<(usize, f64)> = (0..d).map(|c| (c, qp.constraint_matrix[(i, c)])).collect();
            add(&mut a, &coeffs, d + i, qp.constraint_lower[i], qp.constraint_upper[i]);
        }
        for (k, &j) in bounded.iter().enumerate() {
            add(&mut a, &[(j, 1.0)], d + q + k, qp.lower[j], qp.upper[j]);
        }
        // rows with an infinite side are left unconstrained on that side
        let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
        lower.rows_mut(d, nt).fill(0.0);
        let elastic = QuadraticProgram::new(h, g)
            .with_bounds(lower, DVector::from_element(n, f64::INFINITY))
            .with_constraints(a, lo, hi);
        let sol = self.solve_validated(&elastic, None, false);
        let violation: f64 = sol.x.rows(d, nt).iter().map(|v| v.max(0.0)).sum();
        violation > self.settings.infeasibility_tolerance
    }

    /// Re-solves with the guessed active set as equalities.
    fn polish(&self, qp: &QuadraticProgram, std: &Standardized, it: &Iterate) -> Option<(DVector<f64>, QpDuals)> {
        let d = qp.dim();
        let mg = std.general.len();
        // fixed variables and their values
        let mut fixed: Vec<Option<f64>> = vec![None; d];
        for (k, &(j, sign)) in std.bounds.iter().enumerate() {
            if it.z[mg + k] > it.s[mg + k] {
                fixed[j] = Some(if sign > 0.0 { qp.upper[j] } else { qp.lower[j] });
            }
        }
        for row in &std.eq_rows {
            if let EqRow::Bound(j) = *row {
                fixed[j] = Some(qp.lower[j]);
            }
        }
        // active general rows (row, rhs) and equality constraint rows
        let mut active: Vec<(usize, f64)> = Vec::new();
        for (k, &(row, sign)) in std.general.iter().enumerate() {
            if it.z[k] > it.s[k] {
                let rhs = if sign > 0.0 { qp.constraint_upper[row] } else { qp.constraint_lower[row] };
                active.push((row, rhs));
            }
        }
        for row in &std.eq_rows {
            if let EqRow::Constraint(i) = *row {
                active.push((i, qp.constraint_lower[i]));
            }
        }
        let free: Vec<usize> = (0..d).filter(|&j| fixed[j].is_none()).collect();
        let nf = free.len();
        let na = active.len();
        let mut x_fixed = DVector::zeros(d);
        for j in 0..d {
            if let Some(v) = fixed[j] {
                x_fixed[j] = v;
            }
        }
        let hx_fixed = &qp.hessian * &x_fixed;
        let ax_fixed = &qp.constraint_matrix * &x_fixed;
        let mut kkt = DMatrix::zeros(nf + na, nf + na);
        let mut rhs = DVector::zeros(nf + na);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                kkt[(a, b)] = qp.hessian[(i, j)];
            }
            rhs[a] = -qp.gradient[i] - hx_fixed[i];
        }
        for (k, &(row, value)) in active.iter().enumerate() {
            for (a, &j) in free.iter().enumerate() {
                let v = qp.constraint_matrix[(row, j)];
                kkt[(nf + k, a)] = v;
                kkt[(a, nf + k)] = v;
            }
            rhs[nf + k] = value - ax_fixed[row];
        }
        let sol = if nf + na == 0 { DVector::zeros(0) } else { kkt.lu().solve(&rhs)? };
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut x = x_fixed;
        for (a, &j) in free.iter().enumerate() {
            x[j] = sol[a];
        }
        let mut duals = QpDuals::zeros(qp);
        for (k, &(row, _)) in active.iter().enumerate() {
            duals.constraints[row] += sol[nf + k];
        }
        let stationarity = &qp.hessian * &x + &qp.gradient + qp.constraint_matrix.tr_mul(&duals.constraints);
        for j in 0..d {
            if fixed[j].is_some() {
                duals.bounds[j] = -stationarity[j];
            }
        }
        // reject when the guess violates primal feasibility or dual signs
        let tol = 1e-9;
        let ax = &qp.constraint_matrix * &x;
        for i in 0..qp.num_constraints() {
            let (lo, hi) = (qp.constraint_lower[i], qp.constraint_upper[i]);
            let scale = 1.0 + ax[i].abs();
            if ax[i] < lo - tol * scale || ax[i] > hi + tol * scale {
                return None;
            }
            let y = duals.constraints[i];
            if !is_equal(lo, hi) && ((y > 0.0 && (hi - ax[i]).abs() > tol * scale) || (y < 0.0 && (ax[i] - lo).abs() > tol * scale)) {
                return None;
            }
        }
        let dual_tol = 1e-9 * (1.0 + qp.gradient.amax());
        for j in 0..d {
            let (lo, hi) = (qp.lower[j], qp.upper[j]);
            let scale = 1.0 + x[j].abs();
            if x[j] < lo - tol * scale || x[j] > hi + tol * scale {
                return None;
            }
            if let Some(v) = fixed[j] {
                let w = duals.bounds[j];
                if !is_equal(lo, hi) && ((v == hi && w < -dual_tol) || (v == lo && w > dual_tol)) {
                    return None;
                }
            }
        }
        for (k, &(row, _)) in active.iter().enumerate() {
            let (lo, hi) = (qp.constraint_lower[row], qp.constraint_upper[row]);
            if is_equal(lo, hi) {
                continue;
            }
            let y = sol[nf + k];
            let at_upper = (hi - ax[row]).abs() <= (ax[row] - lo).abs();
            if (at_upper && y < -dual_tol) || (!at_upper && y > dual_tol) {
                return None;
            }
        }
        Some((x, duals))
    }
}

/// Solves with default settings and an optional primal warm start.
pub fn solve_qp(qp: &QuadraticProgram, warm_start: Option<&DVector<f64>>) -> Result<QpSolution, QpError> {
    let warm = warm_start.map(|x| WarmStart::primal(x.clone()));
    QpSolver::default().solve(qp, warm.as_ref())
}
