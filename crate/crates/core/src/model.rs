//! Prediction models shared by the controllers, the observer and the plant.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{
    continuous_dynamics, integrate, rk4_step, ControlInput, DisturbanceVector, DynamicsError, QuadrotorParams, State,
    Vector12,
};
use crate::sdc::{build_a, build_b, discretize_affine, factorize, DiscreteModel, SdcModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// One discrete step `x+ = phi(x, u)` and its Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// A controlled system as seen by the controllers and the simulation loop.
pub trait ControlModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn disturbance_dim(&self) -> usize;

    /// Indices of the horizontal position inside the state, if the model has one.
    fn position_indices(&self) -> Option<[usize; 2]>;

    /// Input holding the system at rest.
    fn equilibrium_input(&self) -> DVector<f64>;

    /// State at which the fixed (offline) linearization is taken.
    fn equilibrium_state(&self) -> DVector<f64> {
        DVector::zeros(self.state_dim())
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>, ModelError>;

    /// SDC form `A x + B u + C` frozen at `(x_lin, u_lin)`.
    fn factorize(&self, x_lin: &DVector<f64>, u_lin: &DVector<f64>) -> Result<SdcModel, ModelError>;

    /// Discrete prediction step used by the nonlinear controller.
    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<Transition, ModelError>;

    /// [`transition`](Self::transition) without the Jacobians.
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<DVector<f64>, ModelError> {
        Ok(self.transition(x, u, dt)?.next)
    }

    /// Advances the true system over `dt` with `u` and `d` held; returns the
    /// intermediate samples, the last being the state at `dt`.
    fn simulate(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        d: &DVector<f64>,
        dt: f64,
    ) -> Result<Vec<DVector<f64>>, ModelError>;
}

fn check_len(name: &str, v: &DVector<f64>, n: usize) -> Result<(), ModelError> {
    if v.len() != n {
        return Err(ModelError::Dimension(format!("{name} has {} entries, expected {n}", v.len())));
    }
    Ok(())
}

fn to_state(x: &DVector<f64>) -> Result<State, ModelError> {
    check_len("state", x, 12)?;
    Ok(State::from_slice(x.as_slice()))
}

fn to_input(u: &DVector<f64>) -> Result<ControlInput, ModelError> {
    check_len("input", u, 4)?;
    Ok(ControlInput::new(u[0], nalgebra::Vector3::new(u[1], u[2], u[3])))
}

fn to_disturbance(d: &DVector<f64>) -> Result<DisturbanceVector, ModelError> {
    check_len("disturbance", d, 6)?;
    Ok(DisturbanceVector::new(
        nalgebra::Vector3::new(d[0], d[1], d[2]),
        nalgebra::Vector3::new(d[3], d[4], d[5]),
    ))
}

fn dvec(v: &Vector12) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

/// Nonlinear quadrotor; the plant integrates with RK4 substeps.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrotorModel {
    pub params: QuadrotorParams,
    pub plant_substeps: usize,
}

impl QuadrotorModel {
    pub fn new(params: QuadrotorParams) -> Self {
        Self {
            params,
            plant_substeps: 10,
        }
    }

    /// Continuous Jacobians `(df/dx, df/du)`.
    fn jacobians(&self, x: &State, u: &ControlInput) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        let a = build_a(x, u.thrust, &self.params)?;
        let b = build_b(&x.eta, &self.params);
        Ok((
            DMatrix::from_column_slice(12, 12, a.as_slice()),
            DMatrix::from_column_slice(12, 4, b.as_slice()),
        ))
    }
}

impl Default for QuadrotorModel {
    fn default() -> Self {
        Self::new(QuadrotorParams::default())
    }
}

impl ControlModel for QuadrotorModel {
    fn state_dim(&self) -> usize {
        12
    }

    fn input_dim(&self) -> usize {
        4
    }

    fn disturbance_dim(&self) -> usize {
        6
    }

    fn position_indices(&self) -> Option<[usize; 2]> {
        Some([0, 1])
    }

    fn equilibrium_input(&self) -> DVector<f64> {
        DVector::from_column_slice(self.params.hover_input().to_vector().as_slice())
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let f = continuous_dynamics(&to_state(x)?, &to_input(u)?, &self.params, &to_disturbance(d)?)?;
        Ok(dvec(&f))
    }

    fn factorize(&self, x_lin: &DVector<f64>, u_lin: &DVector<f64>) -> Result<SdcModel, ModelError> {
        Ok(factorize(&to_state(x_lin)?, &to_input(u_lin)?, &self.params)?)
    }

    /// Single RK4 step over `dt`; Jacobians by differentiating each stage.
    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<Transition, ModelError> {
        let state = to_state(x)?;
        let input = to_input(u)?;
        let zero = DisturbanceVector::default();
        let eye = DMatrix::<f64>::identity(12, 12);

        let mut next = x.clone();
        let mut jx = eye.clone();
        let mut ju = DMatrix::zeros(12, 4);
        let mut prev_k = DVector::zeros(12);
        let mut prev_kx = DMatrix::zeros(12, 12);
        let mut prev_ku = DMatrix::zeros(12, 4);
        for (stage, (shift, weight)) in [(0.0, 1.0), (0.5, 2.0), (0.5, 2.0), (1.0, 1.0)].into_iter().enumerate() {
            let (point, dpoint_x, dpoint_u) = if stage == 0 {
                (state, eye.clone(), DMatrix::zeros(12, 4))
            } else {
                let h = shift * dt;
                (
                    State::from_slice((x + &prev_k * h).as_slice()),
                    &eye + &prev_kx * h,
                    &prev_ku * h,
                )
            };
            let k = dvec(&continuous_dynamics(&point, &input, &self.params, &zero)?);
            let (a, b) = self.jacobians(&point, &input)?;
            let kx = &a * dpoint_x;
            let ku = &a * dpoint_u + b;
            let w = weight * dt / 6.0;
            next.axpy(w, &k, 1.0);
            jx += &kx * w;
            ju += &ku * w;
            prev_k = k;
            prev_kx = kx;
            prev_ku = ku;
        }
        Ok(Transition { next, a: jx, b: ju })
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<DVector<f64>, ModelError> {
        let next = rk4_step(&to_state(x)?, &to_input(u)?, &self.params, &DisturbanceVector::default(), dt)?;
        Ok(dvec(&next.to_vector()))
    }

    fn simulate(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        d: &DVector<f64>,
        dt: f64,
    ) -> Result<Vec<DVector<f64>>, ModelError> {
        let states = integrate(
            &to_state(x)?,
            &to_input(u)?,
            &self.params,
            &to_disturbance(d)?,
            dt,
            self.plant_substeps,
        )?;
        Ok(states.iter().map(|s| dvec(&s.to_vector())).collect())
    }
}

/// Linear time-invariant system `x' = A x + B u + c + E d`. Prediction and
/// plant both use the exact zero-order-hold map, so every controller model is
/// exact.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub e: DMatrix<f64>,
    pub positions: Option<[usize; 2]>,
    pub equilibrium: DVector<f64>,
}

impl LinearSurrogate {
    /// Double integrator `x = (position, velocity)` with one input.
    pub fn double_integrator() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            b: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            c: DVector::zeros(2),
            e: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            positions: None,
            equilibrium: DVector::zeros(1),
        }
    }

    /// The quadrotor linearized at hover, including the gravity offset.
    pub fn hover_linearization(params: &QuadrotorParams) -> Result<Self, ModelError> {
        let model = factorize(&State::default(), &params.hover_input(), params)?;
        Ok(Self {
            a: model.a,
            b: model.b,
            c: model.c,
            e: model.e_d,
            positions: Some([0, 1]),
            equilibrium: model.u_lin,
        })
    }

    fn sampled(&self, dt: f64) -> DiscreteModel {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let model = SdcModel {
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            e_d: self.e.clone(),
            x_lin: DVector::zeros(n),
            u_lin: DVector::zeros(m),
        };
        discretize_affine(&model, dt)
    }

    fn check(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(), ModelError> {
        check_len("state", x, self.a.nrows())?;
        check_len("input", u, self.b.ncols())
    }
}

impl ControlModel for LinearSurrogate {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn disturbance_dim(&self) -> usize {
        self.e.ncols()
    }

    fn position_indices(&self) -> Option<[usize; 2]> {
        self.positions
    }

    fn equilibrium_input(&self) -> DVector<f64> {
        self.equilibrium.clone()
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.check(x, u)?;
        check_len("disturbance", d, self.e.ncols())?;
        Ok(&self.a * x + &self.b * u + &self.c + &self.e * d)
    }

    fn factorize(&self, x_lin: &DVector<f64>, u_lin: &DVector<f64>) -> Result<SdcModel, ModelError> {
        self.check(x_lin, u_lin)?;
        Ok(SdcModel {
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            e_d: self.e.clone(),
            x_lin: x_lin.clone(),
            u_lin: u_lin.clone(),
        })
    }

    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<Transition, ModelError> {
        self.check(x, u)?;
        let disc = self.sampled(dt);
        Ok(Transition {
            next: disc.step(x, u),
            a: disc.a,
            b: disc.b,
        })
    }

    fn simulate(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        d: &DVector<f64>,
        dt: f64,
    ) -> Result<Vec<DVector<f64>>, ModelError> {
        self.check(x, u)?;
        check_len("disturbance", d, self.e.ncols())?;
        let disc = self.sampled(dt);
        Ok(vec![disc.step(x, u) + &disc.e * d])
    }
}
