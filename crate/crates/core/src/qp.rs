//! Dense convex QP solver.
//!
//! Solves `min ½ zᵀHz + fᵀz  s.t.  lo ≤ Gz ≤ hi` with an operator-splitting
//! (ADMM) iteration on Ruiz-equilibrated data. The reduced KKT matrix
//! `H + σI + GᵀRG` is factorized once and reused across iterations, and only
//! refactorized when the penalty ρ is adapted. Once the iterates are coarsely
//! converged, the solver guesses the active set and solves the equality
//! constrained KKT system directly ("polishing"); a polished point that meets
//! the KKT conditions to `tol` terminates the solve.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Regularization added to `H` before any factorization.
pub const HESSIAN_REGULARIZATION: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid problem data: {0}")]
    Invalid(String),
    #[error("KKT factorization failed")]
    Factorization,
}

/// Convex quadratic program with two-sided linear inequality constraints.
#[derive(Debug, Clone)]
pub struct QpProblem {
    h: DMatrix<f64>,
    f: DVector<f64>,
    g: DMatrix<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        g: DMatrix<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    ) -> Result<Self, QpError> {
        let d = f.len();
        if h.nrows() != d || h.ncols() != d {
            return Err(QpError::Dimension(format!(
                "H is {}x{}, expected {d}x{d}",
                h.nrows(),
                h.ncols()
            )));
        }
        let q = lo.len();
        if hi.len() != q || g.nrows() != q {
            return Err(QpError::Dimension(format!(
                "G has {} rows, lo has {}, hi has {}",
                g.nrows(),
                q,
                hi.len()
            )));
        }
        if q > 0 && g.ncols() != d {
            return Err(QpError::Dimension(format!(
                "G has {} columns, expected {d}",
                g.ncols()
            )));
        }
        if h.iter()
            .chain(f.iter())
            .chain(g.iter())
            .any(|v| !v.is_finite())
        {
            return Err(QpError::Invalid("non-finite entry in H, f or G".into()));
        }
        let scale = h.amax().max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (h[(i, j)] - h[(j, i)]).abs() > 1e-10 * scale {
                    return Err(QpError::Invalid(format!("H is not symmetric at ({i},{j})")));
                }
            }
        }
        for i in 0..q {
            if lo[i].is_nan() || hi[i].is_nan() || lo[i] > hi[i] {
                return Err(QpError::Invalid(format!(
                    "bounds of row {i} are inconsistent: [{}, {}]",
                    lo[i], hi[i]
                )));
            }
        }
        let g = if q == 0 { DMatrix::zeros(0, d) } else { g };
        Ok(Self { h, f, g, lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.lo.len()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn f(&self) -> &DVector<f64> {
        &self.f
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn lo(&self) -> &DVector<f64> {
        &self.lo
    }

    pub fn hi(&self) -> &DVector<f64> {
        &self.hi
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z)
    }

    /// Largest bound violation of `Gz`, zero when feasible.
    pub fn primal_violation(&self, z: &DVector<f64>) -> f64 {
        let gz = &self.g * z;
        (0..gz.len())
            .map(|i| (self.lo[i] - gz[i]).max(gz[i] - self.hi[i]).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    IterationCapReached,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::IterationCapReached => "cap_reached",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z_star: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
    /// `max(lo - Gz, Gz - hi, 0)` at `z_star`.
    pub primal_residual: f64,
    /// `‖Hz + f + Gᵀy‖∞` at `z_star`.
    pub dual_residual: f64,
    /// Constraint multipliers; negative on active lower bounds, positive on
    /// active upper bounds.
    pub duals: DVector<f64>,
    pub polished: bool,
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub max_iter: usize,
    pub tol: f64,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub adaptive_rho_interval: usize,
    pub polish: bool,
    /// Relative residual below which active-set polishing is attempted.
    pub polish_gate: f64,
    pub polish_interval: usize,
    pub scaling_iters: usize,
    /// Primal infeasibility allowed for a best-iterate candidate when the cap
    /// is reached.
    pub best_feasibility_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iter: 4000,
            tol: 1e-6,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            adaptive_rho_interval: 25,
            polish: true,
            polish_gate: 1e-3,
            polish_interval: 5,
            scaling_iters: 10,
            best_feasibility_tol: 1e-3,
        }
    }
}

impl QpSettings {
    pub fn with_cap(cap: usize, tol: f64) -> Self {
        Self {
            max_iter: cap,
            tol,
            ..Self::default()
        }
    }
}

/// Solve with default settings except for the iteration cap and tolerance.
pub fn solve_qp(p: &QpProblem, cap: usize, tol: f64) -> Result<QpSolution, QpError> {
    if cap == 0 {
        return Err(QpError::Invalid("iteration cap must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(QpError::Invalid("tolerance must be positive".into()));
    }
    solve_with(p, &QpSettings::with_cap(cap, tol))
}

const INFEASIBILITY_EPS: f64 = 1e-5;
const DIVERGENCE_BOUND: f64 = 1e8;
const DIVERGENCE_RUN: usize = 100;
const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

/// Equilibrated copy of the problem restricted to rows with a finite bound.
struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    rows: Vec<usize>,
}

fn clamp_norm(v: f64) -> f64 {
    if v < 1e-4 {
        1.0
    } else {
        v.min(1e4)
    }
}

fn equilibrate(p: &QpProblem, iters: usize) -> Scaled {
    let n = p.dim();
    let rows: Vec<usize> = (0..p.constraint_count())
        .filter(|&i| p.lo[i].is_finite() || p.hi[i].is_finite())
        .collect();
    let m = rows.len();
    let mut pm = p.h.clone();
    for i in 0..n {
        pm[(i, i)] += HESSIAN_REGULARIZATION;
    }
    let mut a = DMatrix::zeros(m, n);
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    for (r, &i) in rows.iter().enumerate() {
        a.set_row(r, &p.g.row(i));
        l[r] = p.lo[i];
        u[r] = p.hi[i];
    }
    let mut q = p.f.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);

    for _ in 0..iters {
        let mut dd = DVector::zeros(n);
        for j in 0..n {
            let mut nrm = pm.column(j).amax();
            if m > 0 {
                nrm = nrm.max(a.column(j).amax());
            }
            dd[j] = 1.0 / clamp_norm(nrm).sqrt();
        }
        let mut de = DVector::zeros(m);
        for i in 0..m {
            de[i] = 1.0 / clamp_norm(a.row(i).amax()).sqrt();
        }
        for j in 0..n {
            for i in 0..n {
                pm[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..m {
                a[(i, j)] *= de[i] * dd[j];
            }
            q[j] *= dd[j];
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    for i in 0..m {
        l[i] *= e[i];
        u[i] *= e[i];
    }
    let mean_col = if n > 0 {
        (0..n).map(|j| pm.column(j).amax()).sum::<f64>() / n as f64
    } else {
        1.0
    };
    let c = 1.0 / clamp_norm(mean_col.max(q.amax()));
    pm *= c;
    q *= c;
    Scaled {
        p: pm,
        q,
        a,
        l,
        u,
        d,
        e,
        c,
        rows,
    }
}

fn factor_kkt(
    s: &Scaled,
    sigma: f64,
    rho_vec: &DVector<f64>,
) -> Result<Cholesky<f64, Dyn>, QpError> {
    let n = s.p.nrows();
    let mut k = s.p.clone();
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    if s.a.nrows() > 0 {
        let mut ra = s.a.clone();
        for i in 0..ra.nrows() {
            let r = rho_vec[i];
            ra.row_mut(i).scale_mut(r);
        }
        k.gemm_tr(1.0, &s.a, &ra, 1.0);
    }
    Cholesky::new(k).ok_or(QpError::Factorization)
}

fn rho_vector(s: &Scaled, rho: f64) -> DVector<f64> {
    DVector::from_iterator(
        s.l.len(),
        (0..s.l.len()).map(|i| {
            if (s.u[i] - s.l[i]).abs() < 1e-12 {
                rho * RHO_EQ_FACTOR
            } else {
                rho
            }
        }),
    )
}

pub fn solve_with(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    if settings.max_iter == 0 {
        return Err(QpError::Invalid("iteration cap must be at least 1".into()));
    }
    let n = p.dim();
    // a constant row whose interval excludes zero cannot be satisfied
    for i in 0..p.constraint_count() {
        if p.g.row(i).iter().all(|v| *v == 0.0) && (p.lo[i] > 0.0 || p.hi[i] < 0.0) {
            let z = DVector::zeros(n);
            return Ok(finish(
                p,
                z,
                DVector::zeros(p.constraint_count()),
                QpStatus::Infeasible,
                0,
                false,
            ));
        }
    }
    let s = equilibrate(p, settings.scaling_iters);
    let m = s.rows.len();
    let tol = settings.tol;

    let mut rho = settings.rho;
    let mut rho_vec = rho_vector(&s, rho);
    let mut kkt = factor_kkt(&s, settings.sigma, &rho_vec)?;
    let mut h_reg = p.h.clone();
    for i in 0..n {
        h_reg[(i, i)] += HESSIAN_REGULARIZATION;
    }
    let h_chol = if settings.polish {
        Cholesky::new(h_reg)
    } else {
        None
    };

    let mut x = DVector::<f64>::zeros(n);
    let mut z = DVector::<f64>::zeros(m);
    let mut y = DVector::<f64>::zeros(m);
    let mut ax = DVector::<f64>::zeros(m);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut tmp_m = DVector::<f64>::zeros(m);
    let mut z_tilde = DVector::<f64>::zeros(m);
    let mut px = DVector::<f64>::zeros(n);
    let mut aty = DVector::<f64>::zeros(n);
    let mut delta_y = DVector::<f64>::zeros(m);

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut diverging_run = 0usize;
    let mut last_polish_set: Option<Vec<i8>> = None;
    let mut last_polish_iter = 0usize;
    let alpha = settings.alpha;

    for iter in 1..=settings.max_iter {
        // x-update
        rhs.copy_from(&x);
        rhs *= settings.sigma;
        rhs -= &s.q;
        if m > 0 {
            tmp_m.copy_from(&z);
            tmp_m.component_mul_assign(&rho_vec);
            tmp_m -= &y;
            rhs.gemv_tr(1.0, &s.a, &tmp_m, 1.0);
        }
        kkt.solve_mut(&mut rhs);
        let x_tilde = &rhs;
        if m > 0 {
            z_tilde.gemv(1.0, &s.a, x_tilde, 0.0);
        }
        // relaxation
        x *= 1.0 - alpha;
        x.axpy(alpha, x_tilde, 1.0);
        ax *= 1.0 - alpha;
        ax.axpy(alpha, &z_tilde, 1.0);
        // z- and y-update; `tmp_m` holds the relaxed z̃
        for i in 0..m {
            let zr = alpha * z_tilde[i] + (1.0 - alpha) * z[i];
            let zn = (zr + y[i] / rho_vec[i]).clamp(s.l[i], s.u[i]);
            let yn = y[i] + rho_vec[i] * (zr - zn);
            delta_y[i] = yn - y[i];
            y[i] = yn;
            z[i] = zn;
        }
        // residuals, reported in unscaled units
        px.gemv(1.0, &s.p, &x, 0.0);
        if m > 0 {
            aty.gemv_tr(1.0, &s.a, &y, 0.0);
        }
        let mut r_prim = 0.0f64;
        let mut prim_norm = 0.0f64;
        for i in 0..m {
            r_prim = r_prim.max(((ax[i] - z[i]) / s.e[i]).abs());
            prim_norm = prim_norm.max(ax[i].abs()).max(z[i].abs());
        }
        let mut r_dual = 0.0f64;
        let mut dual_norm = 0.0f64;
        for j in 0..n {
            let v = px[j] + s.q[j] + aty[j];
            r_dual = r_dual.max((v / s.d[j]).abs() / s.c);
            dual_norm = dual_norm
                .max(px[j].abs())
                .max(aty[j].abs())
                .max(s.q[j].abs());
        }
        let r_prim_scaled = (0..m).map(|i| (ax[i] - z[i]).abs()).fold(0.0, f64::max);
        let r_dual_scaled = (0..n)
            .map(|j| (px[j] + s.q[j] + aty[j]).abs())
            .fold(0.0, f64::max);

        // best-iterate tracking on the unscaled objective
        let obj = (0.5 * x.dot(&px) + s.q.dot(&x)) / s.c;
        if r_prim <= settings.best_feasibility_tol.max(tol)
            && best.as_ref().map_or(true, |(b, _)| obj < *b)
        {
            best = Some((obj, x.component_mul(&s.d)));
        }

        if r_prim <= tol && r_dual <= tol {
            let x_un = x.component_mul(&s.d);
            let y_un = unscale_duals(p, &s, &y);
            if settings.polish {
                if let Some(sol) = polish(p, &s, &z, &y, h_chol.as_ref(), tol, iter) {
                    return Ok(sol);
                }
            }
            return Ok(finish(p, x_un, y_un, QpStatus::Optimal, iter, false));
        }

        let rel_prim = r_prim_scaled / prim_norm.max(1e-12);
        let rel_dual = r_dual_scaled / dual_norm.max(1e-12);
        if settings.polish
            && rel_prim.max(rel_dual) <= settings.polish_gate
            && iter >= last_polish_iter + settings.polish_interval
        {
            let set = active_set(&s, &z, &y);
            if last_polish_set.as_ref() != Some(&set) {
                last_polish_iter = iter;
                if let Some(sol) = polish(p, &s, &z, &y, h_chol.as_ref(), tol, iter) {
                    return Ok(sol);
                }
                last_polish_set = Some(set);
            }
        }

        // infeasibility: certificate on δy, or unbounded multiplier growth
        if m > 0 && iter % 10 == 0 && certifies_infeasibility(&s, &delta_y) {
            return Ok(infeasible(p, &s, &x, &y, iter));
        }
        let y_norm = (0..m)
            .map(|i| (y[i] * s.e[i]).abs() / s.c)
            .fold(0.0, f64::max);
        if y_norm > DIVERGENCE_BOUND {
            diverging_run += 1;
            if diverging_run >= DIVERGENCE_RUN {
                return Ok(infeasible(p, &s, &x, &y, iter));
            }
        } else {
            diverging_run = 0;
        }

        if settings.adaptive_rho
            && m > 0
            && iter % settings.adaptive_rho_interval == 0
            && rel_dual > 0.0
        {
            let ratio = (rel_prim / rel_dual.max(1e-30)).sqrt();
            let new_rho = (rho * ratio).clamp(RHO_MIN, RHO_MAX);
            if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                rho = new_rho;
                rho_vec = rho_vector(&s, rho);
                kkt = factor_kkt(&s, settings.sigma, &rho_vec)?;
            }
        }
    }

    let y_un = unscale_duals(p, &s, &y);
    let x_un = match best {
        Some((_, xb)) => xb,
        None => x.component_mul(&s.d),
    };
    Ok(finish(
        p,
        x_un,
        y_un,
        QpStatus::IterationCapReached,
        settings.max_iter,
        false,
    ))
}

fn unscale_duals(p: &QpProblem, s: &Scaled, y: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(p.constraint_count());
    for (r, &i) in s.rows.iter().enumerate() {
        out[i] = y[r] * s.e[r] / s.c;
    }
    out
}

fn finish(
    p: &QpProblem,
    z: DVector<f64>,
    duals: DVector<f64>,
    status: QpStatus,
    iterations: usize,
    polished: bool,
) -> QpSolution {
    let objective = p.objective(&z);
    let primal_residual = p.primal_violation(&z);
    let mut grad = &p.h * &z + &p.f;
    if p.constraint_count() > 0 {
        grad.gemv_tr(1.0, &p.g, &duals, 1.0);
    }
    QpSolution {
        dual_residual: grad.amax(),
        z_star: z,
        status,
        iterations,
        objective,
        primal_residual,
        duals,
        polished,
    }
}

fn infeasible(
    p: &QpProblem,
    s: &Scaled,
    x: &DVector<f64>,
    y: &DVector<f64>,
    iter: usize,
) -> QpSolution {
    let y_un = unscale_duals(p, s, y);
    finish(
        p,
        x.component_mul(&s.d),
        y_un,
        QpStatus::Infeasible,
        iter,
        false,
    )
}

fn certifies_infeasibility(s: &Scaled, dy: &DVector<f64>) -> bool {
    let m = dy.len();
    let dy_norm = (0..m).map(|i| (dy[i] * s.e[i]).abs()).fold(0.0, f64::max);
    if dy_norm < 1e-12 {
        return false;
    }
    let eps = INFEASIBILITY_EPS * dy_norm;
    let mut support = 0.0;
    for i in 0..m {
        let v = dy[i];
        if v > 0.0 {
            if !s.u[i].is_finite() {
                if v * s.e[i] > eps {
                    return false;
                }
                continue;
            }
            support += s.u[i] * v;
        } else if v < 0.0 {
            if !s.l[i].is_finite() {
                if -v * s.e[i] > eps {
                    return false;
                }
                continue;
            }
            support += s.l[i] * v;
        }
    }
    if support >= -eps {
        return false;
    }
    let atdy = s.a.tr_mul(dy);
    let lhs = (0..atdy.len())
        .map(|j| (atdy[j] / s.d[j]).abs())
        .fold(0.0, f64::max);
    lhs <= eps
}

/// -1 lower active, +1 upper active, 0 inactive (scaled-row indexing).
fn active_set(s: &Scaled, z: &DVector<f64>, y: &DVector<f64>) -> Vec<i8> {
    (0..z.len())
        .map(|i| {
            if z[i] - s.l[i] < -y[i] {
                -1
            } else if s.u[i] - z[i] < y[i] {
                1
            } else {
                0
            }
        })
        .collect()
}

/// Solve the equality-constrained KKT system for the guessed active set and
/// accept the point only when it satisfies the KKT conditions to `tol`.
fn polish(
    p: &QpProblem,
    s: &Scaled,
    z: &DVector<f64>,
    y: &DVector<f64>,
    h_chol: Option<&Cholesky<f64, Dyn>>,
    tol: f64,
    iter: usize,
) -> Option<QpSolution> {
    let h_chol = h_chol?;
    let n = p.dim();
    let set = active_set(s, z, y);
    let active: Vec<(usize, i8)> = set
        .iter()
        .enumerate()
        .filter(|(_, &a)| a != 0)
        .map(|(r, &a)| (r, a))
        .collect();
    let k = active.len();
    let (x, nu) = if k == 0 {
        (h_chol.solve(&(-&p.f)), DVector::zeros(0))
    } else {
        let mut ga = DMatrix::zeros(k, n);
        let mut b = DVector::zeros(k);
        for (row, &(r, side)) in active.iter().enumerate() {
            let i = s.rows[r];
            ga.set_row(row, &p.g.row(i));
            b[row] = if side < 0 { p.lo[i] } else { p.hi[i] };
        }
        // Schur complement: (G_A H⁻¹ G_Aᵀ) ν = -b - G_A H⁻¹ f
        let hinv_gat = h_chol.solve(&ga.transpose());
        let hinv_f = h_chol.solve(&p.f);
        let mut schur = &ga * &hinv_gat;
        let rhs = -(&b + &ga * &hinv_f);
        let diag_max = (0..k).map(|i| schur[(i, i)].abs()).fold(0.0, f64::max);
        let nu = match Cholesky::new(schur.clone()) {
            Some(ch) => ch.solve(&rhs),
            None => {
                for i in 0..k {
                    schur[(i, i)] += 1e-10 * diag_max.max(1e-12);
                }
                Cholesky::new(schur)?.solve(&rhs)
            }
        };
        let x = -(hinv_f + &hinv_gat * &nu);
        (x, nu)
    };
    let mut duals = DVector::zeros(p.constraint_count());
    for (row, &(r, side)) in active.iter().enumerate() {
        let v = nu[row];
        // wrong-signed multiplier means the active set guess is wrong
        if (side < 0 && v > tol) || (side > 0 && v < -tol) {
            return None;
        }
        duals[s.rows[r]] = v;
    }
    let sol = finish(p, x, duals, QpStatus::Optimal, iter, true);
    if sol.primal_residual <= tol
        && sol.dual_residual <= tol
        && sol.z_star.iter().all(|v| v.is_finite())
    {
        Some(sol)
    } else {
        None
    }
}
