//! Reference implementations shared by the integration tests. None of them
//! calls into the code paths they are used to check.
#![allow(dead_code)]

use std::collections::HashMap;

use armpc::mpc::MpcProblem;
use armpc::plant::{ConstraintSet, DiscreteModel};
use armpc::svr::SvrModel;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Accelerated projected gradient ascent on the dual of
/// `min ½zᵀHz + fᵀz  s.t.  lo ≤ Gz ≤ hi`, with `H` positive definite.
/// Multipliers of the upper and lower sides are kept separately and
/// projected onto the nonnegative orthant. Returns `z(μ)` once the KKT
/// residuals fall below `1e-12` (relative) or after `max_iter` steps.
pub fn projected_gradient_qp(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    g: &DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    max_iter: usize,
) -> DVector<f64> {
    let q = g.nrows();
    let chol = h.clone().cholesky().expect("H positive definite");
    let hinv_gt = chol.solve(&g.transpose());
    let hinv_f = chol.solve(f);
    let m = g * &hinv_gt;
    let lip = 2.0 * m.symmetric_eigen().eigenvalues.amax().max(1e-12);
    let step = 1.0 / lip;
    let z_of = |mu: &DVector<f64>| -> DVector<f64> {
        let y = mu.rows(0, q) - mu.rows(q, q);
        -(&hinv_f + &hinv_gt * y)
    };
    let project = |mu: &mut DVector<f64>| {
        for i in 0..q {
            if !hi[i].is_finite() {
                mu[i] = 0.0;
            }
            if !lo[i].is_finite() {
                mu[q + i] = 0.0;
            }
            mu[i] = mu[i].max(0.0);
            mu[q + i] = mu[q + i].max(0.0);
        }
    };
    let grad = |mu: &DVector<f64>| -> DVector<f64> {
        let gz = g * z_of(mu);
        let mut out = DVector::zeros(2 * q);
        for i in 0..q {
            out[i] = if hi[i].is_finite() {
                gz[i] - hi[i]
            } else {
                0.0
            };
            out[q + i] = if lo[i].is_finite() {
                lo[i] - gz[i]
            } else {
                0.0
            };
        }
        out
    };
    let scale = 1.0 + f.amax() + g.amax();
    let residual = |mu: &DVector<f64>| -> f64 {
        let gr = grad(mu);
        let mut r = 0.0f64;
        for i in 0..2 * q {
            r = r.max(gr[i].max(0.0)); // primal violation
            r = r.max((mu[i] * gr[i]).abs()); // complementarity
        }
        r / scale
    };
    let mut mu = DVector::zeros(2 * q);
    let mut prev = mu.clone();
    let mut t = 1.0f64;
    for k in 0..max_iter {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let v = &mu + (&mu - &prev) * ((t - 1.0) / t_next);
        let mut next = &v + grad(&v) * step;
        project(&mut next);
        if (&next - &v).dot(&(&next - &mu)) < 0.0 {
            // momentum points away from the ascent direction; restart
            t = 1.0;
            prev = mu.clone();
            continue;
        }
        prev = std::mem::replace(&mut mu, next);
        t = t_next;
        if k % 200 == 0 && residual(&mu) < 1e-12 {
            break;
        }
    }
    z_of(&mu)
}

/// Random strictly convex QP with a strictly feasible point and
/// `d ≤ 6` variables, `q ≤ 8` constraints; some sides are infinite.
pub fn random_qp<R: Rng>(
    rng: &mut R,
) -> (
    DMatrix<f64>,
    DVector<f64>,
    DMatrix<f64>,
    DVector<f64>,
    DVector<f64>,
) {
    let d = rng.gen_range(1..=6);
    let q = rng.gen_range(1..=8);
    let normal = |rng: &mut R| -> f64 { rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0) };
    let mh = DMatrix::from_fn(d, d, |_, _| normal(rng));
    let h = &mh * mh.transpose() + DMatrix::identity(d, d) * rng.gen_range(0.05..1.0);
    let f = DVector::from_fn(d, |_, _| 3.0 * normal(rng));
    let g = DMatrix::from_fn(q, d, |_, _| normal(rng));
    let z0 = DVector::from_fn(d, |_, _| 0.3 * normal(rng));
    let gz = &g * &z0;
    let mut lo = DVector::zeros(q);
    let mut hi = DVector::zeros(q);
    for i in 0..q {
        lo[i] = gz[i] - rng.gen_range(0.05..1.0);
        hi[i] = gz[i] + rng.gen_range(0.05..1.0);
        match rng.gen_range(0..5) {
            0 => lo[i] = f64::NEG_INFINITY,
            1 => hi[i] = f64::INFINITY,
            _ => {}
        }
    }
    (h, f, g, lo, hi)
}

/// The cycle's QP in the per-step inputs `u_0..u_{T−1}` without any
/// interpolation: cost `Σ_{k<T} ‖x_k − r_k‖²_Q + ‖u_k − v_k‖²_R`, bounds on
/// `x_1..x_T`, `u_k`, and per-step rate limits including `u_0 − u_prev`.
pub fn per_step_qp(
    p: &MpcProblem,
    q_w: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
) -> (
    DMatrix<f64>,
    DVector<f64>,
    DMatrix<f64>,
    DVector<f64>,
    DVector<f64>,
) {
    let (a, b) = (&p.model.a_d, &p.model.b_d);
    let (m, n, t) = (a.nrows(), b.ncols(), p.t);
    let d = n * t;
    // x_k = free[k] + Σ_j phi[k][j] u_j, k = 0..T
    let mut free = vec![p.x_c.clone()];
    let mut phi: Vec<DMatrix<f64>> = vec![DMatrix::zeros(m, d)];
    for k in 0..t {
        free.push(a * &free[k]);
        let mut next = a * &phi[k];
        let mut blk = next.view_mut((0, k * n), (m, n));
        blk += b;
        phi.push(next);
    }
    let mut h = DMatrix::zeros(d, d);
    let mut f = DVector::zeros(d);
    for k in 0..t {
        let e = &free[k] - p.refs_x.row(k).transpose();
        h += phi[k].transpose() * q_w * &phi[k];
        f += phi[k].transpose() * q_w * e;
        let mut hb = h.view_mut((k * n, k * n), (n, n));
        hb += r_w;
        let mut fb = f.rows_mut(k * n, n);
        fb -= r_w * p.refs_u.row(k).transpose();
    }
    h *= 2.0;
    f *= 2.0;
    let bounds: &ConstraintSet = &p.model.bounds;
    let mut rows: Vec<(Vec<f64>, f64, f64)> = Vec::new();
    for k in 1..=t {
        for i in 0..m {
            if bounds.x_min[i].is_finite() || bounds.x_max[i].is_finite() {
                let row: Vec<f64> = phi[k].row(i).iter().copied().collect();
                rows.push((
                    row,
                    bounds.x_min[i] - free[k][i],
                    bounds.x_max[i] - free[k][i],
                ));
            }
        }
    }
    for k in 0..t {
        for j in 0..n {
            let mut row = vec![0.0; d];
            row[k * n + j] = 1.0;
            if bounds.u_min[j].is_finite() || bounds.u_max[j].is_finite() {
                rows.push((row, bounds.u_min[j], bounds.u_max[j]));
            }
            if !(bounds.du_min[j].is_finite() || bounds.du_max[j].is_finite()) {
                continue;
            }
            let mut rate = vec![0.0; d];
            rate[k * n + j] = 1.0;
            let (mut l, mut u) = (bounds.du_min[j], bounds.du_max[j]);
            if k == 0 {
                l += p.u_prev[j];
                u += p.u_prev[j];
            } else {
                rate[(k - 1) * n + j] = -1.0;
            }
            rows.push((rate, l, u));
        }
    }
    let g = DMatrix::from_fn(rows.len(), d, |r, c| rows[r].0[c]);
    let lo = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let hi = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.2));
    (h, f, g, lo, hi)
}

/// `(1/T) Σ_{k<T} ‖x_k − r_k‖²_Q + ‖u_k‖²_R` of the per-step inputs applied
/// to `model` from `x_c`.
pub fn rollout(
    model: &DiscreteModel,
    q_w: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
    x_c: &DVector<f64>,
    refs: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
) -> f64 {
    let mut x = x_c.clone();
    let mut acc = 0.0;
    for k in 0..inputs.nrows() {
        let u = inputs.row(k).transpose();
        let e = &x - refs.row(k).transpose();
        acc += e.dot(&(q_w * &e)) + u.dot(&(r_w * &u));
        x = &model.a_d * &x + &model.b_d * &u;
    }
    acc / inputs.nrows() as f64
}

pub struct KktReport {
    pub max_abs_coeff_excess: f64,
    pub coeff_sum: f64,
    pub max_violation: f64,
    pub checked: usize,
}

/// Dual feasibility and ε-tube complementarity of a trained model on its
/// training set. A point's coefficient is 0 unless its standardized row
/// appears among the support vectors.
pub fn svr_kkt(model: &SvrModel, x: &DMatrix<f64>, y: &DVector<f64>) -> KktReport {
    let c = model.c_reg;
    let tau = model.tau;
    let key = |v: &[f64]| v.iter().map(|a| a.to_bits()).collect::<Vec<u64>>();
    let mut coeff: HashMap<Vec<u64>, f64> = HashMap::new();
    for (sv, a) in model.support_vectors.iter().zip(&model.dual_coeffs) {
        *coeff.entry(key(sv)).or_insert(0.0) += a;
    }
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let rows: Vec<Vec<f64>> = (0..x.nrows())
        .map(|r| x.row(r).iter().copied().collect())
        .collect();
    for r in &rows {
        *seen.entry(key(&model.scaler.transform(r))).or_insert(0) += 1;
    }
    let excess = model
        .dual_coeffs
        .iter()
        .map(|a| a.abs() - c)
        .fold(0.0f64, f64::max);
    let sum = model.dual_coeffs.iter().sum::<f64>();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (r, row) in rows.iter().enumerate() {
        let k = key(&model.scaler.transform(row));
        if seen[&k] > 1 {
            continue;
        }
        checked += 1;
        let beta = coeff.get(&k).copied().unwrap_or(0.0);
        let resid = y[r] - model.predict(row).expect("dimension");
        let v = if beta == 0.0 {
            (resid.abs() - tau).max(0.0)
        } else if beta.abs() < c * (1.0 - 1e-9) {
            (resid - tau * beta.signum()).abs()
        } else {
            (tau - resid * beta.signum()).max(0.0)
        };
        worst = worst.max(v);
    }
    KktReport {
        max_abs_coeff_excess: excess.max(0.0),
        coeff_sum: sum,
        max_violation: worst,
        checked,
    }
}

/// `z ↦ sin(z)/z` with the removable singularity filled.
pub fn sinc(z: f64) -> f64 {
    if z.abs() < 1e-12 {
        1.0
    } else {
        z.sin() / z
    }
}

/// A cycle of `plant` at a random in-bounds state, tracking a smooth ramp
/// towards a random target, with a random previous input.
pub fn random_cycle<R: Rng>(
    plant: &armpc::plant::Plant,
    t: usize,
    p: usize,
    rng: &mut R,
) -> MpcProblem {
    let b = &plant.config.constraints;
    let draw = |lo: f64, hi: f64, rng: &mut R| -> f64 {
        if lo.is_finite() && hi.is_finite() {
            rng.gen_range(0.6 * lo..0.6 * hi)
        } else {
            rng.gen_range(-0.5..0.5)
        }
    };
    let m = plant.state_dim();
    let n = plant.input_dim();
    let x_c = DVector::from_fn(m, |i, _| draw(b.x_min[i], b.x_max[i], rng));
    let target = DVector::from_fn(m, |i, _| draw(b.x_min[i], b.x_max[i], rng));
    let rise = rng.gen_range(2.0..20.0);
    let refs_x = DMatrix::from_fn(t, m, |k, i| {
        x_c[i] + (target[i] - x_c[i]) * (k as f64 / rise).min(1.0)
    });
    let u_prev = DVector::from_fn(n, |j, _| 0.5 * draw(b.u_min[j], b.u_max[j], rng));
    MpcProblem {
        model: plant.model_at(&x_c, b),
        x_c,
        refs_x,
        refs_u: DMatrix::zeros(t, n),
        t,
        p,
        u_prev,
    }
}
