//! Newton–Euler rigid-body model of a quadrotor.
//!
//! State layout is `[p, v, eta, omega]` (12 entries): inertial position and
//! velocity, ZYX Euler angles `[roll, pitch, yaw]` and body angular rates.
//! Inputs are `[T, tau_roll, tau_pitch, tau_yaw]`. Gravity acts along `-z`.

use nalgebra::{Matrix3, SVector, Vector3, Vector4};
use thiserror::Error;

pub type Vector12 = SVector<f64, 12>;
pub type Vector6 = SVector<f64, 6>;

/// Pitch angles closer than this to +/- pi/2 are rejected by [`euler_rate_matrix`].
pub const GIMBAL_EPS: f64 = 1e-3;

pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DynamicsError {
    #[error("pitch {pitch} rad is within the gimbal-lock guard of +/- pi/2")]
    GimbalLock { pitch: f64 },
    #[error("invalid quadrotor parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub inertia_diag: Vector3<f64>,
    pub gravity: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia_diag: Vector3::new(0.029, 0.029, 0.055),
            gravity: STANDARD_GRAVITY,
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.mass > 0.0) {
            return Err(DynamicsError::InvalidParams("mass must be positive"));
        }
        if !self.inertia_diag.iter().all(|&j| j > 0.0) {
            return Err(DynamicsError::InvalidParams("inertia entries must be positive"));
        }
        if !(self.gravity > 0.0) {
            return Err(DynamicsError::InvalidParams("gravity must be positive"));
        }
        Ok(())
    }

    pub fn inertia(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia_diag)
    }

    pub fn inertia_inv(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia_diag.map(|j| 1.0 / j))
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn hover_input(&self) -> ControlInput {
        ControlInput::new(self.hover_thrust(), Vector3::zeros())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct State {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub eta: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl State {
    pub fn hover_at(p: Vector3<f64>) -> Self {
        Self {
            p,
            ..Self::default()
        }
    }

    pub fn from_vector(x: &Vector12) -> Self {
        Self {
            p: x.fixed_rows::<3>(0).into_owned(),
            v: x.fixed_rows::<3>(3).into_owned(),
            eta: x.fixed_rows::<3>(6).into_owned(),
            omega: x.fixed_rows::<3>(9).into_owned(),
        }
    }

    /// Panics if `x` has fewer than 12 entries.
    pub fn from_slice(x: &[f64]) -> Self {
        Self::from_vector(&Vector12::from_column_slice(&x[..12]))
    }

    pub fn to_vector(&self) -> Vector12 {
        let mut x = Vector12::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.p);
        x.fixed_rows_mut::<3>(3).copy_from(&self.v);
        x.fixed_rows_mut::<3>(6).copy_from(&self.eta);
        x.fixed_rows_mut::<3>(9).copy_from(&self.omega);
        x
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    pub thrust: f64,
    pub torques: Vector3<f64>,
}

impl ControlInput {
    pub fn new(thrust: f64, torques: Vector3<f64>) -> Self {
        Self { thrust, torques }
    }

    pub fn from_vector(u: &Vector4<f64>) -> Self {
        Self::new(u[0], Vector3::new(u[1], u[2], u[3]))
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.thrust, self.torques.x, self.torques.y, self.torques.z)
    }
}

/// Lumped external disturbance: inertial-frame force and body-frame torque.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DisturbanceVector {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl DisturbanceVector {
    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Self {
        Self { force, torque }
    }

    pub fn from_vector(d: &Vector6) -> Self {
        Self {
            force: d.fixed_rows::<3>(0).into_owned(),
            torque: d.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6 {
        let mut d = Vector6::zeros();
        d.fixed_rows_mut::<3>(0).copy_from(&self.force);
        d.fixed_rows_mut::<3>(3).copy_from(&self.torque);
        d
    }
}

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Body-to-inertial rotation `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rotation_matrix(eta: &Vector3<f64>) -> Matrix3<f64> {
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    let (sp, cp) = eta.z.sin_cos();
    Matrix3::new(
        cp * ct,
        cp * st * sf - sp * cf,
        cp * st * cf + sp * sf,
        sp * ct,
        sp * st * sf + cp * cf,
        sp * st * cf - cp * sf,
        -st,
        ct * sf,
        ct * cf,
    )
}

fn check_gimbal(eta: &Vector3<f64>) -> Result<(), DynamicsError> {
    if eta.y.abs() >= std::f64::consts::FRAC_PI_2 - GIMBAL_EPS || !eta.y.is_finite() {
        Err(DynamicsError::GimbalLock { pitch: eta.y })
    } else {
        Ok(())
    }
}

/// Maps body rates to Euler-angle rates, `eta_dot = W(eta) * omega`.
pub fn euler_rate_matrix(eta: &Vector3<f64>) -> Result<Matrix3<f64>, DynamicsError> {
    check_gimbal(eta)?;
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    let tt = st / ct;
    Ok(Matrix3::new(
        1.0,
        sf * tt,
        cf * tt,
        0.0,
        cf,
        -sf,
        0.0,
        sf / ct,
        cf / ct,
    ))
}

/// Right-hand side of the Newton–Euler equations with an additive disturbance.
pub fn continuous_dynamics(
    x: &State,
    u: &ControlInput,
    params: &QuadrotorParams,
    d: &DisturbanceVector,
) -> Result<Vector12, DynamicsError> {
    let w = euler_rate_matrix(&x.eta)?;
    let rot = rotation_matrix(&x.eta);
    let m = params.mass;
    let j = params.inertia();

    let p_dot = x.v;
    let v_dot = Vector3::new(0.0, 0.0, -params.gravity)
        + rot * Vector3::new(0.0, 0.0, u.thrust) / m
        + d.force / m;
    let eta_dot = w * x.omega;
    let gyro = x.omega.cross(&(j * x.omega));
    let omega_dot = params
        .inertia_diag
        .zip_map(&(u.torques - gyro + d.torque), |jj, t| t / jj);

    let mut dx = Vector12::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&p_dot);
    dx.fixed_rows_mut::<3>(3).copy_from(&v_dot);
    dx.fixed_rows_mut::<3>(6).copy_from(&eta_dot);
    dx.fixed_rows_mut::<3>(9).copy_from(&omega_dot);
    Ok(dx)
}

fn offset(x: &State, k: &Vector12, h: f64) -> State {
    State::from_vector(&(x.to_vector() + k * h))
}

/// One classical Runge–Kutta step with `u` and `d` held constant.
pub fn rk4_step(
    x: &State,
    u: &ControlInput,
    params: &QuadrotorParams,
    d: &DisturbanceVector,
    dt: f64,
) -> Result<State, DynamicsError> {
    let k1 = continuous_dynamics(x, u, params, d)?;
    let k2 = continuous_dynamics(&offset(x, &k1, 0.5 * dt), u, params, d)?;
    let k3 = continuous_dynamics(&offset(x, &k2, 0.5 * dt), u, params, d)?;
    let k4 = continuous_dynamics(&offset(x, &k3, dt), u, params, d)?;
    Ok(State::from_vector(
        &(x.to_vector() + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0)),
    ))
}

/// Integrates over `duration` with `substeps` equal RK4 steps; returns every
/// intermediate state, the last one being the state at `duration`.
pub fn integrate(
    x: &State,
    u: &ControlInput,
    params: &QuadrotorParams,
    d: &DisturbanceVector,
    duration: f64,
    substeps: usize,
) -> Result<Vec<State>, DynamicsError> {
    let substeps = substeps.max(1);
    let h = duration / substeps as f64;
    let mut out = Vec::with_capacity(substeps);
    let mut cur = *x;
    for _ in 0..substeps {
        cur = rk4_step(&cur, u, params, d, h)?;
        out.push(cur);
    }
    Ok(out)
}
