//! Riccati and Lyapunov solvers plus the terminal ingredients built from them.
//!
//! The continuous algebraic Riccati equation
//! `A' S + S A - S B R^-1 B' S + Q = 0` is solved through the stable
//! invariant subspace of the Hamiltonian matrix, found with a reordered
//! complex Schur form, and then polished with one Kleinman–Newton step.
//! Lyapunov equations `A' P + P A + Q = 0` are solved by vectorizing over the
//! symmetric unknowns.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

/// Eigenvalues with `|Re| <` this are treated as lying on the imaginary axis.
pub const IMAG_AXIS_TOL: f64 = 1e-9;
/// Largest accepted condition number of the stable-subspace basis.
pub const MAX_BASIS_CONDITION: f64 = 1e12;
/// Relative residual accepted from either solver.
pub const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiccatiError {
    #[error("pair (A, B) is not stabilizable")]
    NotStabilizable,
    #[error("stable subspace basis is ill conditioned (condition number {condition:e})")]
    IllConditioned { condition: f64 },
    #[error("matrix is not Hurwitz (spectral abscissa {abscissa:e})")]
    NotHurwitz { abscissa: f64 },
    #[error("input bound {index} leaves no room around the operating point")]
    DegenerateBounds { index: usize },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("residual {residual:e} exceeds tolerance")]
    Inaccurate { residual: f64 },
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest real part among the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `||A'S + SA - S B R^-1 B' S + Q||_inf`.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> f64 {
    let r_inv_bt = r
        .clone()
        .cholesky()
        .map(|c| c.solve(&b.transpose()))
        .unwrap_or_else(|| DMatrix::from_element(b.ncols(), b.nrows(), f64::NAN));
    let res = a.transpose() * s + s * a - s * b * r_inv_bt * s + q;
    inf_norm(&res)
}

/// `||A'P + PA + Q||_inf`.
pub fn lyapunov_residual(a: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    inf_norm(&(a.transpose() * p + p * a + q))
}

fn check_square(name: &str, m: &DMatrix<f64>, n: usize) -> Result<(), RiccatiError> {
    if m.nrows() != n || m.ncols() != n {
        return Err(RiccatiError::DimensionMismatch(format!(
            "{name} is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Swaps the adjacent diagonal entries `k` and `k + 1` of the upper
/// triangular `t`, updating the unitary factor `q` so `q t q^H` is preserved.
fn swap_schur_entries(t: &mut DMatrix<Complex64>, q: &mut DMatrix<Complex64>, k: usize) {
    let t11 = t[(k, k)];
    let t22 = t[(k + 1, k + 1)];
    // eigenvector of the 2x2 block for t22
    let mut v1 = t[(k, k + 1)];
    let mut v2 = t22 - t11;
    let norm = (v1.norm_sqr() + v2.norm_sqr()).sqrt();
    if norm == 0.0 {
        return;
    }
    v1 /= norm;
    v2 /= norm;
    let n = t.nrows();
    // rows <- G^H rows, G = [[v1, -conj(v2)], [v2, conj(v1)]]
    for j in 0..n {
        let a = t[(k, j)];
        let b = t[(k + 1, j)];
        t[(k, j)] = v1.conj() * a + v2.conj() * b;
        t[(k + 1, j)] = -v2 * a + v1 * b;
    }
    for i in 0..n {
        let a = t[(i, k)];
        let b = t[(i, k + 1)];
        t[(i, k)] = a * v1 + b * v2;
        t[(i, k + 1)] = -a * v2.conj() + b * v1.conj();
        let a = q[(i, k)];
        let b = q[(i, k + 1)];
        q[(i, k)] = a * v1 + b * v2;
        q[(i, k + 1)] = -a * v2.conj() + b * v1.conj();
    }
    t[(k + 1, k)] = Complex64::new(0.0, 0.0);
    t[(k, k)] = t22;
    t[(k + 1, k + 1)] = t11;
}

/// Complex Schur form `h = q t q^H` with the eigenvalues satisfying `select`
/// moved to the leading diagonal positions. Returns `(q, t, selected_count)`.
pub fn ordered_schur(
    h: &DMatrix<f64>,
    select: impl Fn(Complex64) -> bool,
) -> (DMatrix<Complex64>, DMatrix<Complex64>, usize) {
    let hc = h.map(|v| Complex64::new(v, 0.0));
    let (mut q, mut t) = nalgebra::Schur::new(hc).unpack();
    let n = t.nrows();
    let mut next = 0;
    for i in 0..n {
        if select(t[(i, i)]) {
            for k in (next..i).rev() {
                swap_schur_entries(&mut t, &mut q, k);
            }
            next += 1;
        }
    }
    (q, t, next)
}

/// PBH test: every eigenvalue of `a` with non-negative real part must leave
/// `[A - lambda I, B]` with full row rank.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let scale = 1.0 + inf_norm(a).max(inf_norm(b));
    for lambda in a.complex_eigenvalues().iter() {
        if lambda.re < -IMAG_AXIS_TOL {
            continue;
        }
        let mut m = DMatrix::<Complex64>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = Complex64::new(a[(i, j)], 0.0);
            }
            m[(i, i)] -= lambda;
            for j in 0..b.ncols() {
                m[(i, n + j)] = Complex64::new(b[(i, j)], 0.0);
            }
        }
        let sv = m.singular_values();
        let smallest = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if smallest < 1e-8 * scale {
            return false;
        }
    }
    true
}

/// Stabilizing solution of the continuous algebraic Riccati equation.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, RiccatiError> {
    let n = a.nrows();
    check_square("A", a, n)?;
    check_square("Q", q, n)?;
    if b.nrows() != n {
        return Err(RiccatiError::DimensionMismatch(format!(
            "B has {} rows, expected {n}",
            b.nrows()
        )));
    }
    let m = b.ncols();
    check_square("R", r, m)?;

    let r_chol = Cholesky::new(symmetrize(r)).ok_or(RiccatiError::NotPositiveDefinite("R"))?;
    let g = b * r_chol.solve(&b.transpose());
    let q = symmetrize(q);

    let mut ham = DMatrix::<f64>::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(a);
    ham.view_mut((0, n), (n, n)).copy_from(&(-&g));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-&q));
    ham.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let (basis, t, stable) = ordered_schur(&ham, |l| l.re < 0.0);
    if (0..2 * n).any(|i| t[(i, i)].re.abs() < IMAG_AXIS_TOL) || stable != n {
        return Err(RiccatiError::NotStabilizable);
    }

    let u1 = basis.view((0, 0), (n, n)).into_owned();
    let u2 = basis.view((n, 0), (n, n)).into_owned();
    // the full basis is orthonormal, so 1 / sigma_min(U1) bounds the condition
    let smin = u1
        .clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let condition = if smin > 0.0 { 1.0 / smin } else { f64::INFINITY };
    if !(condition <= MAX_BASIS_CONDITION) {
        return Err(if is_stabilizable(a, b) {
            RiccatiError::IllConditioned { condition }
        } else {
            RiccatiError::NotStabilizable
        });
    }
    // S U1 = U2  <=>  U1^T S^T = U2^T
    let st = u1
        .transpose()
        .lu()
        .solve(&u2.transpose())
        .ok_or(RiccatiError::IllConditioned { condition })?;
    let mut s = symmetrize(&st.transpose().map(|z| z.re));

    // one Kleinman–Newton refinement
    let k = r_chol.solve(&(b.transpose() * &s));
    let a_cl = a - b * &k;
    if let Ok(refined) = solve_lyapunov(&a_cl, &(&q + k.transpose() * r * &k)) {
        if care_residual(a, b, &q, r, &refined) <= care_residual(a, b, &q, r, &s) {
            s = refined;
        }
    }

    let residual = care_residual(a, b, &q, r, &s);
    if !(residual <= RESIDUAL_TOL * (1.0 + inf_norm(&s))) {
        return Err(RiccatiError::Inaccurate { residual });
    }
    if Cholesky::new(s.clone()).is_none() {
        return Err(RiccatiError::NotPositiveDefinite("Riccati solution"));
    }
    let abscissa = spectral_abscissa(&(a - b * r_chol.solve(&(b.transpose() * &s))));
    if !(abscissa < 0.0) {
        return Err(RiccatiError::NotHurwitz { abscissa });
    }
    Ok(s)
}

/// `K = R^-1 B' S`.
pub fn feedback_gain(
    s: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, RiccatiError> {
    if s.nrows() != b.nrows() || r.nrows() != b.ncols() {
        return Err(RiccatiError::DimensionMismatch("feedback gain operands".into()));
    }
    let chol = Cholesky::new(symmetrize(r)).ok_or(RiccatiError::NotPositiveDefinite("R"))?;
    Ok(chol.solve(&(b.transpose() * s)))
}

fn vech_index(n: usize) -> Vec<Vec<usize>> {
    let mut idx = vec![vec![0; n]; n];
    let mut next = 0;
    for i in 0..n {
        for j in i..n {
            idx[i][j] = next;
            idx[j][i] = next;
            next += 1;
        }
    }
    idx
}

/// Solves `A' P + P A + Q = 0` for Hurwitz `A`.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, RiccatiError> {
    let n = a.nrows();
    check_square("A", a, n)?;
    check_square("Q", q, n)?;
    let abscissa = spectral_abscissa(a);
    if !(abscissa < -IMAG_AXIS_TOL) {
        return Err(RiccatiError::NotHurwitz { abscissa });
    }
    let q = symmetrize(q);
    let idx = vech_index(n);
    let dim = n * (n + 1) / 2;
    let mut system = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for i in 0..n {
        for j in i..n {
            let row = idx[i][j];
            rhs[row] = -q[(i, j)];
            for k in 0..n {
                system[(row, idx[k][j])] += a[(k, i)];
                system[(row, idx[i][k])] += a[(k, j)];
            }
        }
    }
    let lu = system.clone().lu();
    let mut sol = lu
        .solve(&rhs)
        .ok_or(RiccatiError::NotHurwitz { abscissa })?;
    // one step of iterative refinement
    let correction = lu.solve(&(&rhs - &system * &sol));
    if let Some(c) = correction {
        sol += c;
    }
    let p = DMatrix::from_fn(n, n, |i, j| sol[idx[i][j]]);
    let residual = lyapunov_residual(a, &q, &p);
    if !(residual <= RESIDUAL_TOL * (1.0 + inf_norm(&p))) {
        return Err(RiccatiError::Inaccurate { residual });
    }
    Ok(p)
}

/// Largest level `alpha` such that every `x` with `x' P x <= alpha` keeps
/// `|K_i x| <= margins[i]` for each input row.
pub fn terminal_alpha(
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    margins: &[f64],
) -> Result<f64, RiccatiError> {
    if k.nrows() != margins.len() || k.ncols() != p.nrows() {
        return Err(RiccatiError::DimensionMismatch(format!(
            "gain {}x{} against {} margins and {}x{} matrix",
            k.nrows(),
            k.ncols(),
            margins.len(),
            p.nrows(),
            p.ncols()
        )));
    }
    if let Some(index) = margins.iter().position(|&m| !(m > 0.0)) {
        return Err(RiccatiError::DegenerateBounds { index });
    }
    let chol = Cholesky::new(symmetrize(p)).ok_or(RiccatiError::NotPositiveDefinite("terminal matrix"))?;
    let p_inv_kt = chol.solve(&k.transpose());
    let mut alpha = f64::INFINITY;
    for (i, &margin) in margins.iter().enumerate() {
        let spread = k.row(i).dot(&p_inv_kt.column(i).transpose());
        if spread > 0.0 {
            alpha = alpha.min(margin * margin / spread);
        }
    }
    Ok(alpha)
}

/// Terminal cost matrix, local gain and terminal level set.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    /// Riccati solution.
    pub s: DMatrix<f64>,
    /// Local feedback `u = u_op - K x`.
    pub k: DMatrix<f64>,
    /// Terminal cost matrix.
    pub p: DMatrix<f64>,
    pub alpha: f64,
    pub kappa: f64,
}

impl TerminalIngredients {
    /// Whether `dx' P dx <= alpha`.
    pub fn contains(&self, dx: &DVector<f64>) -> bool {
        (dx.transpose() * &self.p * dx)[(0, 0)] <= self.alpha
    }
}

/// State-dependent ingredients: Riccati `S`, gain `K`, and the Lyapunov
/// matrix `P` of the closed loop `A - B K` under `Q + K' R K`.
pub fn sdre_terminal(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    margins: &[f64],
) -> Result<TerminalIngredients, RiccatiError> {
    shifted_terminal(a, b, q, r, 0.0, margins)
}

/// Quasi-infinite-horizon ingredients: as [`sdre_terminal`] but `P` solves
/// the Lyapunov equation of `A - B K + kappa I`.
pub fn shifted_terminal(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    kappa: f64,
    margins: &[f64],
) -> Result<TerminalIngredients, RiccatiError> {
    let s = solve_care(a, b, q, r)?;
    let k = feedback_gain(&s, b, r)?;
    let n = a.nrows();
    let a_k = a - b * &k + DMatrix::identity(n, n) * kappa;
    let q_bar = q + k.transpose() * r * &k;
    let p = solve_lyapunov(&a_k, &q_bar)?;
    let alpha = terminal_alpha(&p, &k, margins)?;
    Ok(TerminalIngredients {
        s,
        k,
        p,
        alpha,
        kappa,
    })
}
