//! State-dependent coefficient (SDC) factorization of the quadrotor model.
//!
//! `f(x, u) = A(x) x + B(x) u + C` where `C` is evaluated at the
//! linearization point so the affine model is exact there.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};

use crate::dynamics::{
    continuous_dynamics, euler_rate_matrix, rotation_matrix, skew, ControlInput,
    DisturbanceVector, DynamicsError, QuadrotorParams, State, Vector12,
};

pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Matrix12x4 = SMatrix<f64, 12, 4>;
pub type Matrix12x6 = SMatrix<f64, 12, 6>;

/// Affine pseudo-linear model frozen at one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct SdcModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub e_d: DMatrix<f64>,
    pub x_lin: DVector<f64>,
    pub u_lin: DVector<f64>,
}

impl SdcModel {
    /// `A x + B u + C + E_d d`.
    pub fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>, d: Option<&DVector<f64>>) -> DVector<f64> {
        let mut out = &self.a * x + &self.b * u + &self.c;
        if let Some(d) = d {
            out += &self.e_d * d;
        }
        out
    }
}

/// Affine model sampled with a zero-order hold on `u` and `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub e: DMatrix<f64>,
}

impl DiscreteModel {
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.c
    }
}

/// Exact discretization through the exponential of the augmented matrix
/// `[A B C E_d; 0 0 0 0] ts`.
pub fn discretize_affine(model: &SdcModel, ts: f64) -> DiscreteModel {
    let n = model.a.nrows();
    let m = model.b.ncols();
    let p = model.e_d.ncols();
    let dim = n + m + 1 + p;
    let mut aug = DMatrix::zeros(dim, dim);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&model.a * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(&model.b * ts));
    aug.view_mut((0, n + m), (n, 1)).copy_from(&(&model.c * ts));
    aug.view_mut((0, n + m + 1), (n, p)).copy_from(&(&model.e_d * ts));
    let phi = aug.exp();
    DiscreteModel {
        a: phi.view((0, 0), (n, n)).into_owned(),
        b: phi.view((0, n), (n, m)).into_owned(),
        c: phi.view((0, n + m), (n, 1)).column(0).into_owned(),
        e: phi.view((0, n + m + 1), (n, p)).into_owned(),
    }
}

/// `d(R(eta) e3) / d eta`, columns ordered roll, pitch, yaw.
pub fn thrust_direction_jacobian(eta: &Vector3<f64>) -> Matrix3<f64> {
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    let (sp, cp) = eta.z.sin_cos();
    let d_roll = Vector3::new(-cp * st * sf + sp * cf, -sp * st * sf - cp * cf, -ct * sf);
    let d_pitch = Vector3::new(cp * ct * cf, sp * ct * cf, -st * cf);
    let d_yaw = Vector3::new(-sp * st * cf + cp * sf, cp * st * cf + sp * sf, 0.0);
    Matrix3::from_columns(&[d_roll, d_pitch, d_yaw])
}

/// `d(W(eta) omega) / d eta`.
pub fn euler_rate_jacobian(eta: &Vector3<f64>, omega: &Vector3<f64>) -> Result<Matrix3<f64>, DynamicsError> {
    // gimbal check shared with W itself
    euler_rate_matrix(eta)?;
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    let (q, r) = (omega.y, omega.z);
    let a = q * cf - r * sf;
    let b = q * sf + r * cf;
    let sec2 = 1.0 / (ct * ct);
    Ok(Matrix3::new(
        a * st / ct,
        b * sec2,
        0.0,
        -b,
        0.0,
        0.0,
        a / ct,
        b * st * sec2,
        0.0,
    ))
}

pub fn build_b(eta: &Vector3<f64>, params: &QuadrotorParams) -> Matrix12x4 {
    let mut b = Matrix12x4::zeros();
    let thrust_dir = rotation_matrix(eta) * Vector3::z() / params.mass;
    b.fixed_view_mut::<3, 1>(3, 0).copy_from(&thrust_dir);
    b.fixed_view_mut::<3, 3>(9, 1).copy_from(&params.inertia_inv());
    b
}

pub fn build_a(x: &State, thrust_eval: f64, params: &QuadrotorParams) -> Result<Matrix12, DynamicsError> {
    let w = euler_rate_matrix(&x.eta)?;
    let j = params.inertia();
    let mut a = Matrix12::zeros();
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(3, 6)
        .copy_from(&(thrust_direction_jacobian(&x.eta) * (thrust_eval / params.mass)));
    a.fixed_view_mut::<3, 3>(6, 6)
        .copy_from(&euler_rate_jacobian(&x.eta, &x.omega)?);
    a.fixed_view_mut::<3, 3>(6, 9).copy_from(&w);
    let a44 = params.inertia_inv() * (skew(&(j * x.omega)) - skew(&x.omega) * j);
    a.fixed_view_mut::<3, 3>(9, 9).copy_from(&a44);
    Ok(a)
}

/// `C = f(x_lin, u_lin, 0) - A x_lin - B u_lin`.
pub fn affine_offset(
    x_lin: &State,
    u_lin: &ControlInput,
    a: &Matrix12,
    b: &Matrix12x4,
    params: &QuadrotorParams,
) -> Result<Vector12, DynamicsError> {
    let f = continuous_dynamics(x_lin, u_lin, params, &DisturbanceVector::default())?;
    Ok(f - a * x_lin.to_vector() - b * u_lin.to_vector())
}

/// Disturbance forces enter the velocity rows through `1/m`, torques the
/// rate rows through `J^-1`.
pub fn build_e_d(params: &QuadrotorParams) -> Matrix12x6 {
    let mut e = Matrix12x6::zeros();
    e.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(Matrix3::identity() / params.mass));
    e.fixed_view_mut::<3, 3>(9, 3).copy_from(&params.inertia_inv());
    e
}

/// Evaluates `A`, `B`, `C` and `E_d` at `(x_lin, u_lin)`; `A` uses the thrust of `u_lin`.
pub fn factorize(
    x_lin: &State,
    u_lin: &ControlInput,
    params: &QuadrotorParams,
) -> Result<SdcModel, DynamicsError> {
    let a = build_a(x_lin, u_lin.thrust, params)?;
    let b = build_b(&x_lin.eta, params);
    let c = affine_offset(x_lin, u_lin, &a, &b, params)?;
    let e = build_e_d(params);
    Ok(SdcModel {
        a: DMatrix::from_column_slice(12, 12, a.as_slice()),
        b: DMatrix::from_column_slice(12, 4, b.as_slice()),
        c: DVector::from_column_slice(c.as_slice()),
        e_d: DMatrix::from_column_slice(12, 6, e.as_slice()),
        x_lin: DVector::from_column_slice(x_lin.to_vector().as_slice()),
        u_lin: DVector::from_column_slice(u_lin.to_vector().as_slice()),
    })
}
