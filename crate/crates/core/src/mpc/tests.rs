use std::sync::Arc;

use approx::assert_relative_eq;
use nalgebra::{dmatrix, dvector, DMatrix, DVector, Vector2};

use super::*;
use crate::dynamics::{QuadrotorParams, State};
use crate::model::{ControlModel, LinearSurrogate, QuadrotorModel};
use crate::observer::DisturbanceObserver;
use crate::qp::solve_qp;
use crate::sdc::{factorize, SdcModel};

fn hover_state(p: [f64; 3]) -> DVector<f64> {
    DVector::from_column_slice(State::hover_at(p.into()).to_vector().as_slice())
}

fn quad() -> Arc<dyn ControlModel> {
    Arc::new(QuadrotorModel::default())
}

fn double_integrator_cfg(horizon: usize) -> MpcConfig {
    MpcConfig {
        horizon,
        ts: 0.1,
        q: DMatrix::identity(2, 2),
        r: dmatrix![1.0],
        u_min: dvector![-5.0],
        u_max: dvector![5.0],
        ..MpcConfig::default()
    }
}

#[test]
fn zero_order_hold_examples() {
    let model = SdcModel {
        a: dmatrix![0.0, 1.0; 0.0, 0.0],
        b: dmatrix![0.0; 1.0],
        c: dvector![0.0, -9.81],
        e_d: dmatrix![0.0; 1.0],
        x_lin: DVector::zeros(2),
        u_lin: DVector::zeros(1),
    };
    let d = discretize_affine(&model, 0.1);
    assert!((&d.a - dmatrix![1.0, 0.1; 0.0, 1.0]).amax() < 1e-15);
    assert_relative_eq!(d.b[(0, 0)], 0.005, epsilon = 1e-15);
    assert_relative_eq!(d.b[(1, 0)], 0.1, epsilon = 1e-15);
    assert_relative_eq!(d.c[0], -0.04905, epsilon = 1e-15);
    assert_relative_eq!(d.c[1], -0.981, epsilon = 1e-15);

    let params = QuadrotorParams::default();
    let hover = factorize(&State::default(), &params.hover_input(), &params).unwrap();
    let disc = discretize_affine(&hover, 0.1);
    let dv = &disc.e * dvector![0.3, 0.0, 0.0, 0.0, 0.0, 0.0];
    assert_relative_eq!(dv[3], 0.03, epsilon = 1e-15);
    assert_relative_eq!(dv[0], 0.0015, epsilon = 1e-15);
}

#[test]
fn obstacle_linearization_examples() {
    let obs = ObstacleSpec {
        center: Vector2::new(-1.0, -1.0),
        radius: 0.5,
        inflation_margin: 0.0,
    };
    let h = linearize_obstacle(&Vector2::zeros(), &obs).unwrap();
    let s = 0.5f64.sqrt();
    assert_relative_eq!(h.normal, Vector2::new(s, s), epsilon = 1e-15);
    assert_relative_eq!(h.offset, -(2.0f64.sqrt()) + 0.5, epsilon = 1e-12);
    assert_relative_eq!(h.offset, -0.91421, epsilon = 1e-5);

    // tangency: a boundary point satisfies its own constraint with equality
    let angle: f64 = 0.7;
    let on_circle = obs.center + Vector2::new(angle.cos(), angle.sin()) * 0.5;
    let h = linearize_obstacle(&on_circle, &obs).unwrap();
    assert_relative_eq!(h.normal.dot(&on_circle), h.offset, epsilon = 1e-12);

    assert_eq!(linearize_obstacle(&obs.center, &obs), Err(MpcError::CenterCoincidence));
}

#[test]
fn pure_input_penalty_gives_zero_inputs() {
    let cfg = MpcConfig {
        q: DMatrix::zeros(2, 2),
        ..double_integrator_cfg(5)
    };
    let model = LinearSurrogate::double_integrator().factorize(&DVector::zeros(2), &DVector::zeros(1)).unwrap();
    let disc = discretize_affine(&model, cfg.ts);
    let window = reference_window(&DVector::zeros(2), 0.0, &cfg, &DVector::zeros(1));
    let tqp = build_tracking_qp(&vec![disc; 5], &window, &cfg, &dvector![1.0, 0.5], &[], &DMatrix::zeros(2, 2), None)
        .unwrap();
    let sol = solve_qp(&tqp.qp, None).unwrap();
    assert!(sol.x.amax() < 1e-9);
}

/// Sparse formulation over (u0, x1, u1, x2) solved as one KKT system.
#[test]
fn condensed_qp_matches_sparse_kkt() {
    let cfg = double_integrator_cfg(2);
    let a = dmatrix![1.0, 0.1; 0.0, 1.0];
    let b = dmatrix![0.0; 0.1];
    let p = dmatrix![3.0, 0.5; 0.5, 2.0];
    let x0 = dvector![1.0, 0.0];
    let disc = DiscreteModel {
        a: a.clone(),
        b: b.clone(),
        c: DVector::zeros(2),
        e: DMatrix::zeros(2, 1),
    };
    let window = reference_window(&DVector::zeros(2), 0.0, &cfg, &DVector::zeros(1));
    let tqp = build_tracking_qp(&[disc.clone(), disc], &window, &cfg, &x0, &[], &p, None).unwrap();
    let sol = solve_qp(&tqp.qp, None).unwrap();

    // z = [u0, x1 (2), u1, x2 (2)], cost z' W z, equalities G z = h
    let mut w = DMatrix::zeros(6, 6);
    w[(0, 0)] = 1.0;
    w.view_mut((1, 1), (2, 2)).copy_from(&DMatrix::identity(2, 2));
    w[(3, 3)] = 1.0;
    w.view_mut((4, 4), (2, 2)).copy_from(&p);
    let mut g = DMatrix::zeros(4, 6);
    // x1 - B u0 = A x0
    g.view_mut((0, 0), (2, 1)).copy_from(&(-&b));
    g.view_mut((0, 1), (2, 2)).copy_from(&DMatrix::identity(2, 2));
    // x2 - A x1 - B u1 = 0
    g.view_mut((2, 1), (2, 2)).copy_from(&(-&a));
    g.view_mut((2, 3), (2, 1)).copy_from(&(-&b));
    g.view_mut((2, 4), (2, 2)).copy_from(&DMatrix::identity(2, 2));
    let mut h = DVector::zeros(4);
    h.rows_mut(0, 2).copy_from(&(&a * &x0));
    let mut kkt = DMatrix::zeros(10, 10);
    kkt.view_mut((0, 0), (6, 6)).copy_from(&(&w * 2.0));
    kkt.view_mut((0, 6), (6, 4)).copy_from(&g.transpose());
    kkt.view_mut((6, 0), (4, 6)).copy_from(&g);
    let mut rhs = DVector::zeros(10);
    rhs.rows_mut(6, 4).copy_from(&h);
    let z = kkt.lu().solve(&rhs).unwrap();
    let zz = z.rows(0, 6).into_owned();
    let oracle_cost = zz.dot(&(&w * &zz)) + x0.dot(&x0);

    assert_relative_eq!(sol.x[0], z[0], epsilon = 1e-9);
    assert_relative_eq!(sol.x[1], z[3], epsilon = 1e-9);
    assert_relative_eq!(tqp.cost(&sol.x), oracle_cost, epsilon = 1e-9);
    let traj = tqp.trajectory(&sol.x);
    assert_relative_eq!(traj[2], z.rows(4, 2).into_owned(), epsilon = 1e-9);
}

#[test]
fn disturbance_offset_superposes() {
    let params = QuadrotorParams::default();
    let cfg = MpcConfig::default();
    let hover = factorize(&State::default(), &params.hover_input(), &params).unwrap();
    let disc = discretize_affine(&hover, cfg.ts);
    // E_dd d cancels the extra bias exactly
    let d = dvector![-0.2, 0.0, 0.0, 0.0, 0.0, 0.0];
    let biased = DiscreteModel {
        c: &disc.c - &disc.e * &d,
        ..disc.clone()
    };
    let x0 = hover_state([0.0, 0.0, 1.0]);
    let window = reference_window(&x0, 0.0, &cfg, &hover.u_lin);
    let p = DMatrix::identity(12, 12);
    let plain = build_tracking_qp(&vec![disc; cfg.horizon], &window, &cfg, &x0, &[], &p, None).unwrap();
    let compensated = build_tracking_qp(&vec![biased; cfg.horizon], &window, &cfg, &x0, &[], &p, Some(&d)).unwrap();
    let u = DVector::from_fn(cfg.horizon * 4, |j, _| if j % 4 == 0 { 9.0 } else { 0.01 });
    let a = plain.trajectory(&u);
    let b = compensated.trajectory(&u);
    assert!((&a[cfg.horizon] - &b[cfg.horizon]).amax() < 1e-12);

    // a disturbance equal to -m g cancels the gravity row: zero thrust does not fall
    let lift = dvector![0.0, 0.0, params.mass * params.gravity, 0.0, 0.0, 0.0];
    let hover_disc = discretize_affine(&hover, cfg.ts);
    let lifted = build_tracking_qp(&vec![hover_disc; cfg.horizon], &window, &cfg, &x0, &[], &p, Some(&lift)).unwrap();
    let traj = lifted.trajectory(&DVector::zeros(cfg.horizon * 4));
    assert!((&traj[cfg.horizon] - &x0).amax() < 1e-12);
}

#[test]
fn zero_estimate_gives_identical_qp() {
    let params = QuadrotorParams::default();
    let cfg = MpcConfig::default();
    let x0 = hover_state([0.2, -0.1, 0.9]);
    let hover = factorize(&State::from_slice(x0.as_slice()), &params.hover_input(), &params).unwrap();
    let disc = discretize_affine(&hover, cfg.ts);
    let window = reference_window(&hover_state([0.0, 0.0, 1.0]), 0.0, &cfg, &hover.u_lin);
    let p = DMatrix::identity(12, 12);
    let models = vec![disc; cfg.horizon];
    let a = build_tracking_qp(&models, &window, &cfg, &x0, &[], &p, None).unwrap();
    let b = build_tracking_qp(&models, &window, &cfg, &x0, &[], &p, Some(&DVector::zeros(6))).unwrap();
    assert_eq!(a, b);
}

fn run_closed_loop(ctrl: &mut dyn Controller, model: &dyn ControlModel, x0: DVector<f64>, reference: &DVector<f64>, steps: usize) -> (DVector<f64>, Vec<ControlStepResult>) {
    let mut x = x0;
    let mut results = Vec::new();
    let d = DVector::zeros(model.disturbance_dim());
    for k in 0..steps {
        let res = ctrl.step(&x, k as f64 * 0.1, reference).unwrap();
        x = model.simulate(&x, &res.u_applied, &d, 0.1).unwrap().pop().unwrap();
        results.push(res);
    }
    (x, results)
}

#[test]
fn sdc_regulates_hover() {
    let model = QuadrotorModel::default();
    let reference = hover_state([0.5, -0.5, 1.0]);
    let mut ctrl = SdcMpc::nominal(quad(), MpcConfig::default(), None).unwrap();
    let (x, results) = run_closed_loop(&mut ctrl, &model, reference.clone(), &reference, 50);
    for r in &results {
        assert!(r.feasible);
        assert!((0.0..=20.0).contains(&r.u_applied[0]));
    }
    let err = (x.rows(0, 3) - reference.rows(0, 3)).norm();
    assert!(err <= 0.05, "position error {err}");
}

#[test]
fn distant_obstacle_changes_nothing() {
    let reference = hover_state([1.5, 0.0, 1.0]);
    let x0 = hover_state([1.3, 0.2, 0.9]);
    let far = ObstacleSpec {
        center: Vector2::new(-10.0, -10.0),
        radius: 0.5,
        inflation_margin: 0.1,
    };
    let model = QuadrotorModel::default();
    let mut with = SdcMpc::nominal(quad(), MpcConfig::default(), Some(far)).unwrap();
    let mut without = SdcMpc::nominal(quad(), MpcConfig::default(), None).unwrap();
    let (_, a) = run_closed_loop(&mut with, &model, x0.clone(), &reference, 10);
    let (_, b) = run_closed_loop(&mut without, &model, x0, &reference, 10);
    for (ra, rb) in a.iter().zip(&b) {
        assert!(!ra.obstacle_active);
        assert!((&ra.u_applied - &rb.u_applied).amax() <= 1e-8);
    }
}

#[test]
fn fixed_point_resolve_is_cheap() {
    let params = QuadrotorParams::default();
    let cfg = MpcConfig::default();
    let x0 = hover_state([0.0, 0.0, 1.0]);
    let sdc = factorize(&State::from_slice(x0.as_slice()), &params.hover_input(), &params).unwrap();
    let disc = discretize_affine(&sdc, cfg.ts);
    let reference = hover_state([1.0, 0.0, 1.0]);
    let window = reference_window(&reference, 0.0, &cfg, &sdc.u_lin);
    // linearized at the start, the obstacle caps p_x at 0.15 on every step
    let obs = ObstacleSpec {
        center: Vector2::new(0.4, 0.0),
        radius: 0.2,
        inflation_margin: 0.05,
    };
    let points = vec![x0.clone(); cfg.horizon];
    let mut normals = Vec::new();
    let constraints = obstacle_constraints(&obs, &cfg, 12, [0, 1], &points, &mut normals, &points);
    let tqp = build_tracking_qp(&vec![disc; cfg.horizon], &window, &cfg, &x0, &constraints, &DMatrix::identity(12, 12), None)
        .unwrap();
    let mut solver = crate::qp::QpSolver::default();
    let first = solver.solve(&tqp.qp, None).unwrap();
    let warm = crate::qp::WarmStart {
        x: first.x.clone(),
        duals: Some(first.duals.clone()),
    };
    let again = solver.solve(&tqp.qp, Some(&warm)).unwrap();
    assert_eq!(first.status, crate::qp::QpStatus::Optimal);
    assert!(tqp.active_rows(&first.x, 1e-6) > 0);
    assert!(again.iterations <= 3, "{} iterations", again.iterations);
    assert!((&again.x - &first.x).amax() < 1e-9);
}

#[test]
fn nmpc_warm_start_converges_quickly() {
    let reference = hover_state([0.0, 0.0, 1.0]);
    let mut ctrl = Nmpc::new(quad(), MpcConfig::default(), None).unwrap();
    let first = ctrl.step(&reference, 0.0, &reference).unwrap();
    assert!(first.converged);
    let second = ctrl.step(&reference, 0.0, &reference).unwrap();
    assert!(second.converged);
    assert!(second.sqp_iterations <= 2, "{} iterations", second.sqp_iterations);
}

#[test]
fn nmpc_without_state_weight_drives_inputs_to_zero() {
    // stable plant, so a vanishing state weight still admits a terminal problem
    let model: Arc<dyn ControlModel> = Arc::new(LinearSurrogate {
        a: dmatrix![-1.0, 0.0; 0.0, -2.0],
        b: dmatrix![1.0; 1.0],
        c: DVector::zeros(2),
        e: DMatrix::zeros(2, 1),
        positions: None,
        equilibrium: DVector::zeros(1),
    });
    let cfg = MpcConfig {
        q: DMatrix::identity(2, 2) * 1e-12,
        ..double_integrator_cfg(10)
    };
    let mut ctrl = Nmpc::new(model, cfg, None).unwrap();
    let res = ctrl.step(&dvector![1.0, -0.5], 0.0, &DVector::zeros(2)).unwrap();
    for u in &res.predicted_inputs {
        assert!(u.amax() < 1e-6, "{u}");
    }
}

#[test]
fn nmpc_survives_predictions_through_gimbal_lock() {
    // pitching at 2.5 rad/s from 0.8 rad, the hover guess crosses +-pi/2 within the horizon
    let mut x0 = hover_state([0.0, 0.0, 1.0]);
    x0[7] = 0.8;
    x0[10] = 2.5;
    assert!(QuadrotorModel::default().simulate(&x0, &DVector::from_vec(vec![9.81, 0.0, 0.0, 0.0]), &DVector::zeros(6), 2.0).is_err());
    let mut ctrl = Nmpc::new(quad(), MpcConfig::default(), None).unwrap();
    let res = ctrl.step(&x0, 0.0, &hover_state([0.0, 0.0, 1.0])).unwrap();
    assert!(res.u_applied[2] < 0.0, "pitch torque {}", res.u_applied[2]);
}

#[test]
fn nmpc_handles_obstacles() {
    let model = QuadrotorModel::default();
    let obs = ObstacleSpec {
        center: Vector2::new(0.0, 0.0),
        radius: 0.3,
        inflation_margin: 0.05,
    };
    // target on the far side of the obstacle
    let reference = hover_state([-1.0, 0.05, 1.0]);
    let mut ctrl = Nmpc::new(quad(), MpcConfig::default(), Some(obs)).unwrap();
    let (_, results) = run_closed_loop(&mut ctrl, &model, hover_state([1.0, 0.0, 1.0]), &reference, 30);
    for r in &results {
        for x in &r.predicted_states[1..] {
            assert!((x.rows(0, 2) - obs.center).norm() >= obs.radius - 1e-3);
        }
    }
}

#[test]
fn lti_controllers_coincide() {
    let params = QuadrotorParams::default();
    let surrogate = LinearSurrogate::hover_linearization(&params).unwrap();
    let model: Arc<dyn ControlModel> = Arc::new(surrogate.clone());
    let cfg = MpcConfig {
        kappa: 0.0,
        ..MpcConfig::default()
    };
    let reference = hover_state([0.5, -0.3, 1.2]);
    let x0 = hover_state([0.0, 0.0, 1.0]);
    let mut nmpc = Nmpc::new(model.clone(), cfg.clone(), None).unwrap();
    let mut sdc = SdcMpc::nominal(model.clone(), cfg.clone(), None).unwrap();
    let observer = DisturbanceObserver::new(6, 0.9, cfg.ts).unwrap();
    let mut robust = SdcMpc::robust(model, cfg, None, observer).unwrap();
    let (_, a) = run_closed_loop(&mut nmpc, &surrogate, x0.clone(), &reference, 15);
    let (_, b) = run_closed_loop(&mut sdc, &surrogate, x0.clone(), &reference, 15);
    let (_, c) = run_closed_loop(&mut robust, &surrogate, x0, &reference, 15);
    for k in 0..15 {
        assert!((&a[k].u_applied - &b[k].u_applied).amax() <= 1e-8, "step {k} nmpc vs sdc");
        assert!((&c[k].u_applied - &b[k].u_applied).amax() <= 1e-8, "step {k} robust vs sdc");
        assert!(a[k].sqp_iterations <= 2);
    }
}

fn check_candidates(obstacle: Option<ObstacleSpec>, reference: [f64; 3], steps: usize) -> usize {
    let model = QuadrotorModel::default();
    let mut ctrl = SdcMpc::nominal(quad(), MpcConfig::default(), obstacle).unwrap();
    let (_, results) = run_closed_loop(&mut ctrl, &model, hover_state([0.0, 0.0, 1.0]), &hover_state(reference), steps);
    let mut checked = 0;
    for r in &results {
        if let Some(candidate) = r.candidate_objective {
            assert!(candidate >= r.objective - 1e-7 * (1.0 + r.objective.abs()));
            checked += 1;
        }
    }
    checked
}

#[test]
fn shifted_candidate_never_beats_the_optimum() {
    // input bounds alone: the clamped shifted sequence is always feasible
    assert_eq!(check_candidates(None, [-1.8, -1.6, 1.0], 20), 19);
    let obs = ObstacleSpec {
        center: Vector2::new(-1.0, -1.0),
        radius: 0.5,
        inflation_margin: 0.1,
    };
    assert!(check_candidates(Some(obs), [-1.8, -1.6, 1.0], 30) > 0);
}
