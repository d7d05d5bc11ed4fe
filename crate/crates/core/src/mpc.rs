//! Condensed MPC with linearly interpolated input samples.
//!
//! A horizon of `T` steps is parametrized by `P` input samples spaced
//! `ΔT = (T−1)/(P−1)` steps apart. The input at step `k` is
//! `(1−w)·z[k_p] + w·z[k_n]`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;
use web_time::Instant;

use crate::plant::DiscreteModel;
use crate::qp::{self, QpError, QpProblem, QpSettings, QpSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Interpolation coordinates of one horizon step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpWeight {
    pub k_p: usize,
    pub k_n: usize,
    pub w: f64,
}

/// Coordinates for `k = 0..T−1`. Computed in integer arithmetic, so sample
/// instants get `w == 0.0` exactly. The terminal step maps to `(P−1, P−1, 0)`.
pub fn interpolation_weights(t: usize, p: usize) -> Result<Vec<InterpWeight>, MpcError> {
    if p < 2 || p > t {
        return Err(MpcError::Invalid(format!(
            "need 2 <= P <= T, got T={t}, P={p}"
        )));
    }
    let span = t - 1;
    Ok((0..t)
        .map(|k| {
            let num = k * (p - 1);
            let k_p = num / span;
            if k_p >= p - 1 {
                InterpWeight {
                    k_p: p - 1,
                    k_n: p - 1,
                    w: 0.0,
                }
            } else {
                InterpWeight {
                    k_p,
                    k_n: k_p + 1,
                    w: (num % span) as f64 / span as f64,
                }
            }
        })
        .collect())
}

/// Horizon step used for sample `i` in the cost: `round(i·ΔT)`.
pub fn sample_steps(t: usize, p: usize) -> Vec<usize> {
    (0..p)
        .map(|i| {
            let num = i * (t - 1);
            let den = p - 1;
            (num + den / 2) / den
        })
        .collect()
}

/// Expands sampled inputs (`nP`) to per-step inputs (`T×n`).
pub fn expand_inputs(z: &DVector<f64>, n: usize, weights: &[InterpWeight]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(weights.len(), n);
    for (k, iw) in weights.iter().enumerate() {
        for j in 0..n {
            let a = z[iw.k_p * n + j];
            out[(k, j)] = if iw.w == 0.0 {
                a
            } else {
                (1.0 - iw.w) * a + iw.w * z[iw.k_n * n + j]
            };
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub t_max: usize,
    pub ts: f64,
}

impl MpcConfig {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, t_max: usize, ts: f64) -> Result<Self, MpcError> {
        check_psd("Q", &q)?;
        check_psd("R", &r)?;
        if t_max < 2 {
            return Err(MpcError::Invalid("T_max must be at least 2".into()));
        }
        if !(ts > 0.0) {
            return Err(MpcError::Invalid("ts must be positive".into()));
        }
        Ok(Self { q, r, t_max, ts })
    }
}

fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<(), MpcError> {
    if m.nrows() != m.ncols() {
        return Err(MpcError::Dimension(format!("{name} must be square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(MpcError::Invalid(format!("{name} must be symmetric")));
    }
    let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -1e-10 * scale {
        return Err(MpcError::Invalid(format!(
            "{name} must be positive semidefinite"
        )));
    }
    Ok(())
}

/// One control cycle. `refs_x` and `refs_u` have one row per horizon step,
/// paired with the predicted state and input at the same step.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub model: DiscreteModel,
    pub x_c: DVector<f64>,
    pub refs_x: DMatrix<f64>,
    pub refs_u: DMatrix<f64>,
    pub t: usize,
    pub p: usize,
    pub u_prev: DVector<f64>,
}

impl MpcProblem {
    pub fn validate(&self, t_max: usize) -> Result<(), MpcError> {
        let (m, n) = (self.model.state_dim(), self.model.input_dim());
        if self.p < 2 || self.p > self.t || self.t > t_max {
            return Err(MpcError::Invalid(format!(
                "need 2 <= P <= T <= {t_max}, got T={}, P={}",
                self.t, self.p
            )));
        }
        if self.x_c.len() != m || self.u_prev.len() != n {
            return Err(MpcError::Dimension(
                "x_c or u_prev length does not match the model".into(),
            ));
        }
        if self.refs_x.shape() != (self.t, m) || self.refs_u.shape() != (self.t, n) {
            return Err(MpcError::Dimension(format!(
                "references are {:?}/{:?}, expected ({}, {m})/({}, {n})",
                self.refs_x.shape(),
                self.refs_u.shape(),
                self.t,
                self.t
            )));
        }
        Ok(())
    }
}

/// Stacked predictions `x_{c+1..c+T} = S z + n_vec`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedDynamics {
    pub s: DMatrix<f64>,
    pub n_vec: DVector<f64>,
}

pub fn condense(
    model: &DiscreteModel,
    x_c: &DVector<f64>,
    t: usize,
    p: usize,
) -> Result<CondensedDynamics, MpcError> {
    let (m, n) = (model.state_dim(), model.input_dim());
    if x_c.len() != m {
        return Err(MpcError::Dimension(format!(
            "x_c has length {}, model has {m} states",
            x_c.len()
        )));
    }
    let weights = interpolation_weights(t, p)?;
    // A^j B for j = 0..T-1, and A^j x_c for j = 1..T
    let mut apb = Vec::with_capacity(t);
    apb.push(model.b_d.clone());
    for j in 1..t {
        apb.push(&model.a_d * &apb[j - 1]);
    }
    let mut n_vec = DVector::zeros(m * t);
    let mut x = x_c.clone();
    for k in 0..t {
        x = &model.a_d * &x;
        n_vec.rows_mut(k * m, m).copy_from(&x);
    }
    let mut s = DMatrix::zeros(m * t, n * p);
    for k in 0..t {
        for (l, iw) in weights.iter().enumerate().take(k + 1) {
            let blk = &apb[k - l];
            let mut dst = s.view_mut((k * m, iw.k_p * n), (m, n));
            dst += blk * (1.0 - iw.w);
            if iw.w != 0.0 {
                let mut dst = s.view_mut((k * m, iw.k_n * n), (m, n));
                dst += blk * iw.w;
            }
        }
    }
    Ok(CondensedDynamics { s, n_vec })
}

/// Dense QP in the sampled inputs. The cost runs over the sample instants;
/// state bounds are enforced at every predicted step.
pub fn build_qp(p: &MpcProblem, cfg: &MpcConfig) -> Result<QpProblem, MpcError> {
    p.validate(cfg.t_max)?;
    let (m, n) = (p.model.state_dim(), p.model.input_dim());
    if cfg.q.nrows() != m || cfg.r.nrows() != n {
        return Err(MpcError::Dimension(
            "weight matrices do not match the model".into(),
        ));
    }
    let cd = condense(&p.model, &p.x_c, p.t, p.p)?;
    let d = n * p.p;
    let mut h = DMatrix::zeros(d, d);
    let mut f = DVector::zeros(d);
    for (i, &k) in sample_steps(p.t, p.p).iter().enumerate() {
        if k >= 1 {
            let sk = cd.s.rows((k - 1) * m, m);
            let resid = cd.n_vec.rows((k - 1) * m, m) - p.refs_x.row(k).transpose();
            let qs = &cfg.q * sk;
            h += sk.transpose() * &qs;
            f += qs.transpose() * resid;
        }
        let mut hb = h.view_mut((i * n, i * n), (n, n));
        hb += &cfg.r;
        let rv = &cfg.r * p.refs_u.row(k).transpose();
        let mut fb = f.rows_mut(i * n, n);
        fb -= rv;
    }
    h *= 2.0;
    f *= 2.0;
    h = (&h + h.transpose()) * 0.5;

    let b = &p.model.bounds;
    let mut rows: Vec<(DVector<f64>, f64, f64)> = Vec::new();
    for k in 0..p.t {
        for i in 0..m {
            let (lo, hi) = (b.x_min[i], b.x_max[i]);
            if lo.is_finite() || hi.is_finite() {
                let r = k * m + i;
                rows.push((cd.s.row(r).transpose(), lo - cd.n_vec[r], hi - cd.n_vec[r]));
            }
        }
    }
    // the current state is itself bounded; a violation makes the cycle infeasible
    for i in 0..m {
        let (lo, hi) = (b.x_min[i], b.x_max[i]);
        if p.x_c[i] < lo || p.x_c[i] > hi {
            rows.push((DVector::zeros(d), lo - p.x_c[i], hi - p.x_c[i]));
        }
    }
    let unit = |idx: usize| {
        let mut v = DVector::zeros(d);
        v[idx] = 1.0;
        v
    };
    for i in 0..p.p {
        for j in 0..n {
            if b.u_min[j].is_finite() || b.u_max[j].is_finite() {
                rows.push((unit(i * n + j), b.u_min[j], b.u_max[j]));
            }
        }
    }
    let dt = (p.t - 1) as f64 / (p.p - 1) as f64;
    for j in 0..n {
        if b.du_min[j].is_finite() || b.du_max[j].is_finite() {
            rows.push((
                unit(j),
                p.u_prev[j] + b.du_min[j],
                p.u_prev[j] + b.du_max[j],
            ));
            for i in 0..p.p - 1 {
                let mut v = DVector::zeros(d);
                v[(i + 1) * n + j] = 1.0;
                v[i * n + j] = -1.0;
                rows.push((v, b.du_min[j] * dt, b.du_max[j] * dt));
            }
        }
    }
    let q = rows.len();
    let mut g = DMatrix::zeros(q, d);
    let mut lo = DVector::zeros(q);
    let mut hi = DVector::zeros(q);
    for (r, (v, l, u)) in rows.into_iter().enumerate() {
        g.row_mut(r).copy_from(&v.transpose());
        lo[r] = l;
        hi[r] = u;
    }
    Ok(QpProblem::new(h, f, g, lo, hi)?)
}

#[derive(Debug, Clone)]
pub struct ControlSolution {
    pub z_star: DVector<f64>,
    pub u_first: DVector<f64>,
    /// Per-step inputs, `T×n`.
    pub full_inputs: DMatrix<f64>,
    /// Noise-free predicted states `x_{c+1..c+T}`, `T×m`.
    pub predicted: DMatrix<f64>,
    pub qp: QpSolution,
    pub cycle_cost: f64,
    pub solve_time: f64,
}

pub fn solve_mpc(
    p: &MpcProblem,
    cfg: &MpcConfig,
    cap: usize,
    tol: f64,
) -> Result<ControlSolution, MpcError> {
    if cap == 0 || !(tol > 0.0) {
        return Err(QpError::Invalid("cap must be >= 1 and tol > 0".into()).into());
    }
    solve_mpc_with(p, cfg, &QpSettings::with_cap(cap, tol))
}

pub fn solve_mpc_with(
    p: &MpcProblem,
    cfg: &MpcConfig,
    settings: &QpSettings,
) -> Result<ControlSolution, MpcError> {
    let start = Instant::now();
    let qp_problem = build_qp(p, cfg)?;
    let sol = qp::solve_with(&qp_problem, settings)?;
    let n = p.model.input_dim();
    let u_first = sol.z_star.rows(0, n).into_owned();
    let solve_time = start.elapsed().as_secs_f64();
    let weights = interpolation_weights(p.t, p.p)?;
    let full_inputs = expand_inputs(&sol.z_star, n, &weights);
    let (predicted, cycle_cost) = rollout_cost(p, cfg, &full_inputs);
    Ok(ControlSolution {
        z_star: sol.z_star.clone(),
        u_first,
        full_inputs,
        predicted,
        qp: sol,
        cycle_cost,
        solve_time,
    })
}

/// Simulates the nominal model under `inputs` (`T×n`) and returns the
/// predicted states plus the per-step-normalized tracking cost
/// `(1/T) Σ_{k<T} ‖x_k − r_k‖²_Q + ‖u_k − v_k‖²_R`.
pub fn rollout_cost(p: &MpcProblem, cfg: &MpcConfig, inputs: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let m = p.model.state_dim();
    let mut states = DMatrix::zeros(p.t, m);
    let mut x = p.x_c.clone();
    let mut cost = 0.0;
    for k in 0..p.t {
        let u = inputs.row(k).transpose();
        let ex = &x - p.refs_x.row(k).transpose();
        let eu = &u - p.refs_u.row(k).transpose();
        cost += (ex.transpose() * &cfg.q * &ex)[0] + (eu.transpose() * &cfg.r * &eu)[0];
        x = &p.model.a_d * &x + &p.model.b_d * &u;
        states.row_mut(k).copy_from(&x.transpose());
    }
    (states, cost / p.t as f64)
}

/// `|a − b| / b`; `b = 0` yields 0 when `a = 0` and `+∞` otherwise.
pub fn relative_loss(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        return if a == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (a - b).abs() / b
}

pub fn average_cost(cycle_costs: &[f64]) -> Result<f64, MpcError> {
    if cycle_costs.is_empty() {
        return Err(MpcError::Invalid(
            "average of an empty cost sequence".into(),
        ));
    }
    Ok(cycle_costs.iter().sum::<f64>() / cycle_costs.len() as f64)
}
