//! ε-insensitive support vector regression with a Gaussian kernel.
//!
//! The dual is solved by SMO over the `2N` variables `(α⁺, α⁻)` with
//! second-order working-set selection, following the libsvm solver.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MODEL_VERSION: u32 = 1;
const TAU_MIN: f64 = 1e-12;
const SUPPORT_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SvrError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    /// `exp(−scale·‖x − y‖²)`
    Gaussian { scale: f64 },
}

impl Kernel {
    pub fn scale(&self) -> f64 {
        match *self {
            Kernel::Gaussian { scale } => scale,
        }
    }
}

/// z-score standardization fitted on training data. Zero-variance columns
/// are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub input_dim: usize,
    pub keep: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let (n, d) = x.shape();
        let mut keep = Vec::new();
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for j in 0..d {
            let col = x.column(j);
            let mu = col.sum() / n.max(1) as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n.max(1) as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * mu.abs().max(1.0) {
                keep.push(j);
                mean.push(mu);
                std.push(sd);
            }
        }
        if keep.len() < d {
            log::debug!("scaler dropped {} zero-variance feature(s)", d - keep.len());
        }
        Self {
            input_dim: d,
            keep,
            mean,
            std,
        }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        self.keep
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&j, (mu, sd))| (x[j] - mu) / sd)
            .collect()
    }

    fn transform_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), self.keep.len());
        for (c, (&j, (mu, sd))) in self
            .keep
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .enumerate()
        {
            for r in 0..x.nrows() {
                out[(r, c)] = (x[(r, j)] - mu) / sd;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    pub c_reg: f64,
    pub tau: f64,
    pub kernel: Kernel,
    /// Stop once the maximal KKT violation is below this.
    pub tol: f64,
    /// SMO iteration cap.
    pub max_iter: usize,
}

impl Default for SvrParams {
    fn default() -> Self {
        Self {
            c_reg: 7.4129,
            tau: 0.62,
            kernel: Kernel::Gaussian { scale: 0.01 },
            tol: 1e-3,
            max_iter: 2_000_000,
        }
    }
}

impl SvrParams {
    fn validate(&self) -> Result<(), SvrError> {
        if !(self.c_reg > 0.0 && self.c_reg.is_finite()) {
            return Err(SvrError::Invalid("C must be positive".into()));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(SvrError::Invalid("tau must be non-negative".into()));
        }
        if !(self.kernel.scale() > 0.0 && self.kernel.scale().is_finite()) {
            return Err(SvrError::Invalid("kernel scale must be positive".into()));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(SvrError::Invalid(
                "tol must be positive and the cap at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub version: u32,
    pub support_vectors: Vec<Vec<f64>>,
    pub dual_coeffs: Vec<f64>,
    pub bias: f64,
    pub kernel: Kernel,
    pub scaler: Scaler,
    pub tau: f64,
    pub c_reg: f64,
    /// False when SMO hit its cap with the KKT gap above `10·tol`.
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip)]
    packed: Option<Packed>,
}

/// Support vectors packed row-major in single precision for prediction;
/// the expansion is bandwidth bound on large models. Differences and sums
/// are formed in double precision against the unrounded query.
#[derive(Debug, Clone, PartialEq, Default)]
struct Packed {
    dim: usize,
    rows: Vec<f32>,
}

const LANES: usize = 16;

#[inline(always)]
fn sq_dist_lanes(a: &[f32], b: &[f64]) -> f64 {
    // independent partial sums so the adds do not serialize on latency
    let mut acc = [0.0f64; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            let d = x[l] as f64 - y[l];
            acc[l] += d * d;
        }
    }
    for (l, (x, y)) in ra.iter().zip(rb).enumerate() {
        let d = *x as f64 - y;
        acc[l] += d * d;
    }
    let mut half = LANES / 2;
    while half > 0 {
        for l in 0..half {
            acc[l] += acc[l + half];
        }
        half /= 2;
    }
    acc[0]
}

#[inline(always)]
fn distances_lanes(rows: &[f32], dim: usize, z: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(rows.chunks_exact(dim).map(|row| sq_dist_lanes(row, z)));
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn distances_avx2(rows: &[f32], dim: usize, z: &[f64], out: &mut Vec<f64>) {
    use std::arch::x86_64::*;
    out.clear();
    let body = dim - dim % 16;
    for row in rows.chunks_exact(dim) {
        let (rp, zp) = (row.as_ptr(), z.as_ptr());
        let mut acc = [_mm256_setzero_pd(); 4];
        let mut j = 0;
        while j < body {
            for (k, a) in acc.iter_mut().enumerate() {
                let x = _mm256_cvtps_pd(_mm_loadu_ps(rp.add(j + 4 * k)));
                let d = _mm256_sub_pd(x, _mm256_loadu_pd(zp.add(j + 4 * k)));
                *a = _mm256_fmadd_pd(d, d, *a);
            }
            j += 16;
        }
        let s = _mm256_add_pd(_mm256_add_pd(acc[0], acc[1]), _mm256_add_pd(acc[2], acc[3]));
        let mut lanes = [0.0f64; 4];
        _mm256_storeu_pd(lanes.as_mut_ptr(), s);
        let mut total = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
        for (x, y) in row[body..].iter().zip(&z[body..]) {
            let d = *x as f64 - y;
            total += d * d;
        }
        out.push(total);
    }
}

/// Squared distance from `z` to every `dim`-long row of `rows`.
fn distances(rows: &[f32], dim: usize, z: &[f64], out: &mut Vec<f64>) {
    assert!(
        z.len() == dim && rows.len() % dim == 0,
        "packed rows do not match the query"
    );
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            // SAFETY: the required CPU features were detected at runtime, and
            // every row and `z` hold `dim` entries.
            return unsafe { distances_avx2(rows, dim, z, out) };
        }
    }
    distances_lanes(rows, dim, z, out)
}

fn to_f32(v: &[f64]) -> impl Iterator<Item = f32> + '_ {
    v.iter().map(|x| *x as f32)
}

impl SvrModel {
    pub fn input_dim(&self) -> usize {
        self.scaler.input_dim
    }

    pub fn support_count(&self) -> usize {
        self.dual_coeffs.len()
    }

    fn pack(&mut self) {
        let dim = self.scaler.keep.len();
        let rows = self
            .support_vectors
            .iter()
            .flat_map(|v| to_f32(v))
            .collect();
        self.packed = Some(Packed { dim, rows });
    }

    fn validate(&self) -> Result<(), SvrError> {
        if self.version != MODEL_VERSION {
            return Err(SvrError::Format(format!(
                "unsupported model version {}",
                self.version
            )));
        }
        let sc = &self.scaler;
        let d = sc.keep.len();
        if sc.mean.len() != d || sc.std.len() != d {
            return Err(SvrError::Format(
                "scaler statistics do not match retained features".into(),
            ));
        }
        if sc.keep.iter().any(|&j| j >= sc.input_dim) || sc.keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SvrError::Format("scaler indices out of range".into()));
        }
        if sc.std.iter().any(|s| !(*s > 0.0)) {
            return Err(SvrError::Format("scaler std must be positive".into()));
        }
        if self.dual_coeffs.len() != self.support_vectors.len() {
            return Err(SvrError::Format(
                "support vector and coefficient counts differ".into(),
            ));
        }
        if self.support_vectors.iter().any(|v| v.len() != d) {
            return Err(SvrError::Format(format!(
                "support vectors must have {d} entries"
            )));
        }
        if self
            .dual_coeffs
            .iter()
            .any(|a| !a.is_finite() || a.abs() > self.c_reg * (1.0 + 1e-9))
            || !self.bias.is_finite()
        {
            return Err(SvrError::Format("dual coefficients out of range".into()));
        }
        Ok(())
    }

    /// Dual expansion `Σ coeffᵢ K(svᵢ, x) + b` on the standardized input.
    pub fn predict(&self, x: &[f64]) -> Result<f64, SvrError> {
        if x.len() != self.input_dim() {
            return Err(SvrError::Dimension(format!(
                "model expects {} features, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let z = self.scaler.transform(x);
        let scale = self.kernel.scale();
        let owned;
        let packed = match &self.packed {
            Some(p) => p,
            None => {
                let mut m = self.clone();
                m.pack();
                owned = m.packed.expect("packed");
                &owned
            }
        };
        if packed.dim == 0 {
            return Ok(self.bias + self.dual_coeffs.iter().sum::<f64>());
        }
        let mut d2 = Vec::with_capacity(self.dual_coeffs.len());
        distances(&packed.rows, packed.dim, &z, &mut d2);
        let sum: f64 = d2
            .iter()
            .zip(&self.dual_coeffs)
            .map(|(d, c)| c * (-scale * d).exp())
            .sum();
        Ok(self.bias + sum)
    }

    pub fn save(&self, path: &Path) -> Result<(), SvrError> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SvrError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SvrError> {
        let mut m: SvrModel = serde_json::from_str(text)?;
        m.validate()?;
        m.pack();
        Ok(m)
    }

    /// Constant model, used for tests and as a fallback.
    pub fn constant(input_dim: usize, value: f64) -> Self {
        let mut m = Self {
            version: MODEL_VERSION,
            support_vectors: Vec::new(),
            dual_coeffs: Vec::new(),
            bias: value,
            kernel: Kernel::Gaussian { scale: 1.0 },
            scaler: Scaler {
                input_dim,
                keep: Vec::new(),
                mean: Vec::new(),
                std: Vec::new(),
            },
            tau: 0.0,
            c_reg: 1.0,
            converged: true,
            iterations: 0,
            packed: None,
        };
        m.pack();
        m
    }
}

/// A horizon model and a sample-count model whose input is the horizon
/// model's input plus one trailing column, evaluated together. Training
/// points shared by both models have their squared distance computed once.
#[derive(Debug, Clone)]
pub struct PairedModels {
    dim: usize,
    scaler: Scaler,
    scale: f64,
    rows: Vec<f32>,
    t_coeffs: Vec<f64>,
    t_bias: f64,
    /// Sample-count terms as (row, index into `p_values`, coefficient).
    p_terms: Vec<(usize, usize, f64)>,
    /// Distinct scaled trailing values, rounded like the packed rows. The
    /// trailing column is an integer horizon, so there are few of them.
    p_values: Vec<f64>,
    p_bias: f64,
    last_mean: f64,
    last_std: f64,
}

impl PairedModels {
    /// `None` when the two models do not share kernel and feature scaling.
    pub fn new(t: &SvrModel, p: &SvrModel) -> Option<Self> {
        let (ts, ps) = (&t.scaler, &p.scaler);
        let k = ts.keep.len();
        let scale = t.kernel.scale();
        if p.kernel.scale() != scale
            || ps.input_dim != ts.input_dim + 1
            || ps.keep.len() != k + 1
            || ps.keep[..k] != ts.keep[..]
            || ps.keep[k] != ts.input_dim
            || ps.mean[..k] != ts.mean[..]
            || ps.std[..k] != ts.std[..]
            || k == 0
        {
            return None;
        }
        let mut index: std::collections::HashMap<Vec<u64>, usize> =
            std::collections::HashMap::new();
        let mut rows: Vec<f32> = Vec::new();
        let mut intern = |v: &[f64], rows: &mut Vec<f32>| -> usize {
            let key: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
            let next = index.len();
            *index.entry(key).or_insert_with(|| {
                rows.extend(to_f32(v));
                next
            })
        };
        let mut t_coeffs = Vec::new();
        for (v, c) in t.support_vectors.iter().zip(&t.dual_coeffs) {
            let r = intern(v, &mut rows);
            if r == t_coeffs.len() {
                t_coeffs.push(0.0);
            }
            t_coeffs[r] += c;
        }
        let mut p_terms = Vec::new();
        let mut p_values: Vec<f64> = Vec::new();
        for (v, c) in p.support_vectors.iter().zip(&p.dual_coeffs) {
            let r = intern(&v[..k], &mut rows);
            if r == t_coeffs.len() {
                t_coeffs.push(0.0);
            }
            let last = v[k] as f32 as f64;
            let j = match p_values.iter().position(|w| w.to_bits() == last.to_bits()) {
                Some(j) => j,
                None => {
                    p_values.push(last);
                    p_values.len() - 1
                }
            };
            p_terms.push((r, j, *c));
        }
        p_terms.sort_by_key(|e| e.0);
        Some(Self {
            dim: k,
            scaler: ts.clone(),
            scale,
            rows,
            t_coeffs,
            t_bias: t.bias,
            p_terms,
            p_values,
            p_bias: p.bias,
            last_mean: ps.mean[k],
            last_std: ps.std[k],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.scaler.input_dim
    }

    /// Raw horizon prediction, and the sample-count prediction at the
    /// trailing value `last(horizon prediction)`.
    pub fn predict(&self, x: &[f64], last: impl Fn(f64) -> f64) -> Result<(f64, f64), SvrError> {
        if x.len() != self.input_dim() {
            return Err(SvrError::Dimension(format!(
                "model expects {} features, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let z = self.scaler.transform(x);
        let mut d2 = Vec::with_capacity(self.t_coeffs.len());
        distances(&self.rows, self.dim, &z, &mut d2);
        let s = self.scale;
        // every packed row carries a horizon or a sample-count term
        let k: Vec<f64> = d2.iter().map(|d| (-s * d).exp()).collect();
        let pt = self.t_bias
            + k.iter()
                .zip(&self.t_coeffs)
                .map(|(k, c)| c * k)
                .sum::<f64>();
        let e = (last(pt) - self.last_mean) / self.last_std;
        let kv: Vec<f64> = self
            .p_values
            .iter()
            .map(|v| (-s * (e - v) * (e - v)).exp())
            .collect();
        let pp = self.p_bias
            + self
                .p_terms
                .iter()
                .map(|&(r, j, c)| c * k[r] * kv[j])
                .sum::<f64>();
        Ok((pt, pp))
    }
}

struct KernelRows<'a> {
    x: &'a DMatrix<f64>,
    norms: Vec<f64>,
    scale: f64,
    cache: HashMap<usize, (u64, Vec<f64>)>,
    capacity: usize,
    clock: u64,
}

impl<'a> KernelRows<'a> {
    fn new(x: &'a DMatrix<f64>, scale: f64, budget_bytes: usize) -> Self {
        let n = x.nrows();
        let norms = (0..n).map(|i| x.row(i).norm_squared()).collect();
        let capacity = (budget_bytes / (8 * n.max(1))).max(2);
        Self {
            x,
            norms,
            scale,
            cache: HashMap::new(),
            capacity,
            clock: 0,
        }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        self.clock += 1;
        let clock = self.clock;
        if !self.cache.contains_key(&i) {
            if self.cache.len() >= self.capacity {
                let oldest = *self
                    .cache
                    .iter()
                    .min_by_key(|(_, (t, _))| *t)
                    .map(|(k, _)| k)
                    .expect("non-empty");
                self.cache.remove(&oldest);
            }
            let n = self.x.nrows();
            let xi = self.x.row(i);
            let mut row = vec![0.0; n];
            for (j, v) in row.iter_mut().enumerate() {
                let dot = xi.dot(&self.x.row(j));
                let d2 = (self.norms[i] + self.norms[j] - 2.0 * dot).max(0.0);
                *v = (-self.scale * d2).exp();
            }
            self.cache.insert(i, (clock, row));
        }
        let entry = self.cache.get_mut(&i).expect("cached");
        entry.0 = clock;
        &entry.1
    }
}

const KERNEL_CACHE_BYTES: usize = 256 << 20;

/// Fits the scaler on `x`, then solves the ε-SVR dual.
pub fn train_svr(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    params: &SvrParams,
) -> Result<SvrModel, SvrError> {
    params.validate()?;
    let n = x.nrows();
    if n < 1 || y.len() != n {
        return Err(SvrError::Dimension(format!(
            "{} rows but {} targets",
            n,
            y.len()
        )));
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(SvrError::Invalid("non-finite training data".into()));
    }
    let scaler = Scaler::fit(x);
    let z = scaler.transform_matrix(x);
    let mut kr = KernelRows::new(&z, params.kernel.scale(), KERNEL_CACHE_BYTES);
    let c = params.c_reg;
    let l = 2 * n;
    let sign = |t: usize| if t < n { 1.0 } else { -1.0 };
    let mut alpha = vec![0.0f64; l];
    let mut grad: Vec<f64> = (0..l)
        .map(|t| {
            if t < n {
                params.tau - y[t]
            } else {
                params.tau + y[t - n]
            }
        })
        .collect();
    let at_upper = |a: f64| a >= c;
    let at_lower = |a: f64| a <= 0.0;

    let mut iterations = 0;
    let mut gap = f64::INFINITY;
    while iterations < params.max_iter {
        // select i
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..l {
            if sign(t) > 0.0 {
                if !at_upper(alpha[t]) && -grad[t] >= gmax {
                    gmax = -grad[t];
                    i_sel = t;
                }
            } else if !at_lower(alpha[t]) && grad[t] >= gmax {
                gmax = grad[t];
                i_sel = t;
            }
        }
        if i_sel == usize::MAX {
            gap = 0.0;
            break;
        }
        let i = i_sel;
        let ki: Vec<f64> = kr.row(i % n).to_vec();
        let kii = ki[i % n];
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..l {
            let tb = t % n;
            let quad = (kii + 1.0 - 2.0 * ki[tb]).max(TAU_MIN);
            if sign(t) > 0.0 {
                if !at_lower(alpha[t]) {
                    let diff = gmax + grad[t];
                    gmax2 = gmax2.max(grad[t]);
                    if diff > 0.0 {
                        let obj = -diff * diff / quad;
                        if obj <= best {
                            best = obj;
                            j_sel = t;
                        }
                    }
                }
            } else if !at_upper(alpha[t]) {
                let diff = gmax - grad[t];
                gmax2 = gmax2.max(-grad[t]);
                if diff > 0.0 {
                    let obj = -diff * diff / quad;
                    if obj <= best {
                        best = obj;
                        j_sel = t;
                    }
                }
            }
        }
        gap = gmax + gmax2;
        if gap < params.tol || j_sel == usize::MAX {
            break;
        }
        let j = j_sel;
        iterations += 1;
        let kj: Vec<f64> = kr.row(j % n).to_vec();
        let (yi, yj) = (sign(i), sign(j));
        let kij = ki[j % n];
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (mut ai, mut aj) = (old_i, old_j);
        let quad = (2.0 - 2.0 * kij).max(TAU_MIN);
        if yi != yj {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        alpha[i] = ai;
        alpha[j] = aj;
        let (dai, daj) = (ai - old_i, aj - old_j);
        for t in 0..l {
            let tb = t % n;
            let yt = sign(t);
            grad[t] += yt * (yi * ki[tb] * dai + yj * kj[tb] * daj);
        }
    }
    let converged = gap < 10.0 * params.tol;
    if !converged {
        log::warn!("SMO stopped after {iterations} iterations with KKT gap {gap:.3e}");
    }

    // bias from the free variables, midpoint of the feasible interval otherwise
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut nfree, mut sum_free) = (0usize, 0.0);
    for t in 0..l {
        let yg = sign(t) * grad[t];
        if at_upper(alpha[t]) {
            if sign(t) < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower(alpha[t]) {
            if sign(t) > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            nfree += 1;
            sum_free += yg;
        }
    }
    let rho = if nfree > 0 {
        sum_free / nfree as f64
    } else {
        0.5 * (ub + lb)
    };

    let mut support_vectors = Vec::new();
    let mut dual_coeffs = Vec::new();
    for s in 0..n {
        let coef = alpha[s] - alpha[s + n];
        if coef.abs() > SUPPORT_EPS {
            support_vectors.push(z.row(s).iter().copied().collect());
            dual_coeffs.push(coef);
        }
    }
    let mut model = SvrModel {
        version: MODEL_VERSION,
        support_vectors,
        dual_coeffs,
        bias: -rho,
        kernel: params.kernel,
        scaler,
        tau: params.tau,
        c_reg: c,
        converged,
        iterations,
        packed: None,
    };
    model.pack();
    Ok(model)
}

/// `t = clamp(round(pred_t), 2, t_l)`, `p = clamp(round(pred_p), 2, t)`.
pub fn round_and_clamp(pred_t: f64, pred_p: f64, t_l: usize) -> (usize, usize) {
    let t_l = t_l.max(2);
    let clamp = |v: f64, hi: usize| -> usize {
        if v.is_nan() {
            return hi;
        }
        v.round().clamp(2.0, hi as f64) as usize
    };
    let t = clamp(pred_t, t_l);
    (t, clamp(pred_p, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchSpec {
    pub c_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
    pub scale_grid: Vec<f64>,
    pub folds: usize,
}

impl Default for GridSearchSpec {
    fn default() -> Self {
        Self {
            c_grid: vec![7.4129],
            tau_grid: vec![0.62],
            scale_grid: vec![0.01, 0.1, 1.0],
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub c_reg: f64,
    pub tau: f64,
    pub scale: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: SvrParams,
    pub table: Vec<CvRow>,
    pub folds: Vec<usize>,
}

fn rmse(
    model: &SvrModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    rows: &[usize],
) -> Result<f64, SvrError> {
    let mut acc = 0.0;
    let mut buf = vec![0.0; x.ncols()];
    for &r in rows {
        for (c, b) in buf.iter_mut().enumerate() {
            *b = x[(r, c)];
        }
        let e = model.predict(&buf)? - y[r];
        acc += e * e;
    }
    Ok((acc / rows.len().max(1) as f64).sqrt())
}

fn select_rows(x: &DMatrix<f64>, y: &DVector<f64>, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let xs = DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)]);
    let ys = DVector::from_iterator(rows.len(), rows.iter().map(|&r| y[r]));
    (xs, ys)
}

/// Seeded k-fold fold assignment.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        out[i] = pos % folds;
    }
    out
}

/// Exhaustive grid with k-fold cross-validated RMSE. Ties go to smaller C,
/// then larger τ.
pub fn grid_search_cv(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &GridSearchSpec,
    base: &SvrParams,
    seed: u64,
) -> Result<GridResult, SvrError> {
    if spec.c_grid.is_empty() || spec.tau_grid.is_empty() || spec.scale_grid.is_empty() {
        return Err(SvrError::Invalid("empty hyper-parameter grid".into()));
    }
    if spec.folds < 2 || x.nrows() < spec.folds {
        return Err(SvrError::Invalid(format!(
            "need at least {} rows and 2 folds",
            spec.folds
        )));
    }
    let folds = fold_assignment(x.nrows(), spec.folds, seed);
    let mut combos = Vec::new();
    for &c in &spec.c_grid {
        for &tau in &spec.tau_grid {
            for &scale in &spec.scale_grid {
                combos.push(SvrParams {
                    c_reg: c,
                    tau,
                    kernel: Kernel::Gaussian { scale },
                    ..*base
                });
            }
        }
    }
    let eval = |p: &SvrParams| -> Result<CvRow, SvrError> {
        let mut total = 0.0;
        for f in 0..spec.folds {
            let train: Vec<usize> = (0..x.nrows()).filter(|&i| folds[i] != f).collect();
            let val: Vec<usize> = (0..x.nrows()).filter(|&i| folds[i] == f).collect();
            let (xt, yt) = select_rows(x, y, &train);
            let m = train_svr(&xt, &yt, p)?;
            total += rmse(&m, x, y, &val)?;
        }
        Ok(CvRow {
            c_reg: p.c_reg,
            tau: p.tau,
            scale: p.kernel.scale(),
            rmse: total / spec.folds as f64,
        })
    };
    #[cfg(feature = "parallel")]
    let table: Vec<CvRow> = {
        use rayon::prelude::*;
        combos.par_iter().map(eval).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let table: Vec<CvRow> = combos.iter().map(eval).collect::<Result<_, _>>()?;
    let mut best = 0;
    for (k, row) in table.iter().enumerate() {
        let b = &table[best];
        let better = row.rmse < b.rmse
            || (row.rmse == b.rmse
                && (row.c_reg < b.c_reg || (row.c_reg == b.c_reg && row.tau > b.tau)));
        if better {
            best = k;
        }
    }
    Ok(GridResult {
        best: combos[best],
        table,
        folds,
    })
}
