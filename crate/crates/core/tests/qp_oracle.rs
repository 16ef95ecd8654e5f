use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdc_mpc::qp::{solve_qp, QpSolver, QpStatus, QuadraticProgram, WarmStart};

fn random_qp(rng: &mut ChaCha8Rng) -> QuadraticProgram {
    let d = rng.random_range(1..=6);
    let q = rng.random_range(0..=4);
    let l = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let h = &l * l.transpose() + DMatrix::identity(d, d) * 0.1;
    let g = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
    // feasible around x0 by construction
    let x0 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(q, d, |_, _| rng.random_range(-1.0..1.0));
    let ax0 = &a * &x0;
    let mut cl = DVector::zeros(q);
    let mut cu = DVector::zeros(q);
    for i in 0..q {
        cl[i] = if rng.random_bool(0.7) { ax0[i] - rng.random_range(0.0..0.5) } else { f64::NEG_INFINITY };
        cu[i] = if rng.random_bool(0.7) { ax0[i] + rng.random_range(0.0..0.5) } else { f64::INFINITY };
    }
    let mut lb = DVector::zeros(d);
    let mut ub = DVector::zeros(d);
    for j in 0..d {
        lb[j] = if rng.random_bool(0.5) { x0[j] - rng.random_range(0.0..1.0) } else { f64::NEG_INFINITY };
        ub[j] = if rng.random_bool(0.5) { x0[j] + rng.random_range(0.0..1.0) } else { f64::INFINITY };
    }
    QuadraticProgram::new(h, g).with_bounds(lb, ub).with_constraints(a, cl, cu)
}

/// Tries every assignment of {free, lower, upper} to each row and bound,
/// solves the equality-constrained KKT system and keeps the best feasible point.
fn enumerate_active_sets(qp: &QuadraticProgram) -> (DVector<f64>, f64) {
    let d = qp.dim();
    let q = qp.num_constraints();
    // every constraint as (coefficients, lower, upper)
    let mut rows: Vec<(DVector<f64>, f64, f64)> = (0..q)
        .map(|i| (qp.constraint_matrix.row(i).transpose(), qp.constraint_lower[i], qp.constraint_upper[i]))
        .collect();
    for j in 0..d {
        let mut e = DVector::zeros(d);
        e[j] = 1.0;
        rows.push((e, qp.lower[j], qp.upper[j]));
    }
    let n = rows.len();
    let mut best: Option<(DVector<f64>, f64)> = None;
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut active = Vec::new();
        let mut valid = true;
        for (coeffs, lo, hi) in &rows {
            match c % 3 {
                1 if lo.is_finite() => active.push((coeffs.clone(), *lo)),
                2 if hi.is_finite() => active.push((coeffs.clone(), *hi)),
                0 => {}
                _ => valid = false,
            }
            c /= 3;
        }
        if !valid || active.len() > d {
            continue;
        }
        let k = active.len();
        let mut kkt = DMatrix::zeros(d + k, d + k);
        kkt.view_mut((0, 0), (d, d)).copy_from(&qp.hessian);
        let mut rhs = DVector::zeros(d + k);
        rhs.rows_mut(0, d).copy_from(&(-&qp.gradient));
        for (r, (coeffs, value)) in active.iter().enumerate() {
            for j in 0..d {
                kkt[(d + r, j)] = coeffs[j];
                kkt[(j, d + r)] = coeffs[j];
            }
            rhs[d + r] = *value;
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        if (&kkt * &sol - &rhs).amax() > 1e-9 {
            continue;
        }
        let x = sol.rows(0, d).into_owned();
        let feasible = rows.iter().all(|(coeffs, lo, hi)| {
            let v = coeffs.dot(&x);
            v >= lo - 1e-10 && v <= hi + 1e-10
        });
        if !feasible {
            continue;
        }
        let obj = qp.objective(&x);
        if best.as_ref().map_or(true, |b| obj < b.1) {
            best = Some((x, obj));
        }
    }
    best.expect("instances are feasible by construction")
}

#[test]
fn matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let qp = random_qp(&mut rng);
        let (x_ref, obj_ref) = enumerate_active_sets(&qp);
        let sol = solve_qp(&qp, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        assert!(sol.kkt_residual <= 1e-6, "case {case}: kkt {}", sol.kkt_residual);
        let obj_gap = (sol.objective - obj_ref).abs();
        let x_gap = (&sol.x - &x_ref).amax();
        assert!(obj_gap <= 1e-8, "case {case}: objective gap {obj_gap:e}");
        assert!(x_gap <= 1e-6, "case {case}: solution gap {x_gap:e}");
    }
}

#[test]
fn warm_start_does_not_cost_more_than_two_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut solver = QpSolver::default();
    for case in 0..100 {
        let qp = random_qp(&mut rng);
        let first = solver.solve(&qp, None).unwrap();
        let mut perturbed = qp.clone();
        for v in perturbed.gradient.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let cold = solver.solve(&perturbed, None).unwrap();
        let warm = solver.solve(&perturbed, Some(&WarmStart::primal(first.x.clone()))).unwrap();
        assert_eq!(warm.status, QpStatus::Optimal, "case {case}");
        assert!(
            warm.iterations <= cold.iterations + 2,
            "case {case}: warm {} cold {}",
            warm.iterations,
            cold.iterations
        );
    }
}

#[test]
fn identical_inputs_give_identical_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let qp = random_qp(&mut rng);
        let a = solve_qp(&qp, None).unwrap();
        let b = solve_qp(&qp, None).unwrap();
        assert_eq!(a.x.as_slice(), b.x.as_slice());
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.duals, b.duals);
    }
}

#[test]
fn infeasible_general_rows_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let d = 3;
        let l = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(d, d);
        let row = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)).transpose();
        // a'x >= 1 and -a'x >= 0.5 cannot hold together
        let a = DMatrix::from_rows(&[row.clone(), -row]);
        let qp = QuadraticProgram::new(h, DVector::zeros(d)).with_constraints(
            a,
            DVector::from_vec(vec![1.0, 0.5]),
            DVector::from_element(2, f64::INFINITY),
        );
        assert_eq!(solve_qp(&qp, None).unwrap().status, QpStatus::Infeasible);
    }
}
