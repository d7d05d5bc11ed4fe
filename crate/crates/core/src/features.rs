//! Regression features of a reference window: mean discrete curvature and
//! a periodized Daubechies-2 pyramid per state, plus the absolute tracking
//! error. Also the random reference synthesis used to build datasets.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{DiscreteModel, SynthesisSettings};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean of `|∇²r| / (1 + (∇r)²)^{3/2}` over the `len − 2` positions where
/// the second difference exists.
pub fn curvature(traj: &[f64]) -> Result<f64, FeatureError> {
    if traj.len() < 3 {
        return Err(FeatureError::Invalid(format!(
            "curvature needs at least 3 samples, got {}",
            traj.len()
        )));
    }
    let terms = traj.len() - 2;
    let sum: f64 = traj
        .windows(3)
        .map(|w| {
            let d1 = w[1] - w[0];
            let d2 = w[2] - 2.0 * w[1] + w[0];
            d2.abs() / (1.0 + d1 * d1).powf(1.5)
        })
        .sum();
    Ok(sum / terms as f64)
}

/// Analysis filters and level count of a periodized orthonormal DWT.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPlan {
    pub low: [f64; 4],
    pub high: [f64; 4],
    pub levels: usize,
}

impl WaveletPlan {
    /// Daubechies-2 (4 taps).
    pub fn db2(levels: usize) -> Self {
        let s3 = 3f64.sqrt();
        let norm = 4.0 * 2f64.sqrt();
        let low = [
            (1.0 + s3) / norm,
            (3.0 + s3) / norm,
            (3.0 - s3) / norm,
            (1.0 - s3) / norm,
        ];
        let high = [low[3], -low[2], low[1], -low[0]];
        Self {
            low,
            high,
            levels: levels.max(1),
        }
    }

    fn check_len(&self, len: usize) -> Result<(), FeatureError> {
        let div = 1usize << self.levels;
        if len == 0 || len % div != 0 || len / div < 1 {
            return Err(FeatureError::Invalid(format!(
                "signal length {len} is not divisible by 2^{}",
                self.levels
            )));
        }
        Ok(())
    }

    /// Lengths of `(a_L, d_L, d_{L−1}, …, d_1)` for a signal of `len`.
    pub fn band_lengths(&self, len: usize) -> Vec<usize> {
        let mut out = vec![len >> self.levels];
        for l in (1..=self.levels).rev() {
            out.push(len >> l);
        }
        out
    }
}

fn analyze(x: &[f64], plan: &WaveletPlan) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = n / 2;
    let mut a = vec![0.0; half];
    let mut d = vec![0.0; half];
    for i in 0..half {
        for k in 0..4 {
            let v = x[(2 * i + k) % n];
            a[i] += plan.low[k] * v;
            d[i] += plan.high[k] * v;
        }
    }
    (a, d)
}

fn synthesize(a: &[f64], d: &[f64], plan: &WaveletPlan) -> Vec<f64> {
    let n = 2 * a.len();
    let mut x = vec![0.0; n];
    for i in 0..a.len() {
        for k in 0..4 {
            x[(2 * i + k) % n] += plan.low[k] * a[i] + plan.high[k] * d[i];
        }
    }
    x
}

/// Pyramid decomposition, output ordered `a_L, d_L, d_{L−1}, …, d_1`.
pub fn dwt(signal: &[f64], plan: &WaveletPlan) -> Result<Vec<f64>, FeatureError> {
    plan.check_len(signal.len())?;
    let mut approx = signal.to_vec();
    let mut details = Vec::with_capacity(plan.levels);
    for _ in 0..plan.levels {
        let (a, d) = analyze(&approx, plan);
        details.push(d);
        approx = a;
    }
    let mut out = approx;
    for d in details.into_iter().rev() {
        out.extend(d);
    }
    Ok(out)
}

pub fn idwt(coeffs: &[f64], plan: &WaveletPlan) -> Result<Vec<f64>, FeatureError> {
    plan.check_len(coeffs.len())?;
    let bands = plan.band_lengths(coeffs.len());
    let mut approx = coeffs[..bands[0]].to_vec();
    let mut offset = bands[0];
    for &len in &bands[1..] {
        let d = &coeffs[offset..offset + len];
        approx = synthesize(&approx, d, plan);
        offset += len;
    }
    Ok(approx)
}

/// Column naming and offsets of a feature vector. Per state `i`:
/// `[curvature, dwt coefficients…]`, then one error entry per state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub state_names: Vec<String>,
    pub window: usize,
    pub levels: usize,
}

impl FeatureLayout {
    pub fn new(
        state_names: Vec<String>,
        window: usize,
        levels: usize,
    ) -> Result<Self, FeatureError> {
        WaveletPlan::db2(levels).check_len(window)?;
        if window < 3 {
            return Err(FeatureError::Invalid(
                "window must hold at least 3 samples".into(),
            ));
        }
        Ok(Self {
            state_names,
            window,
            levels,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_names.len()
    }

    pub fn per_state(&self) -> usize {
        1 + self.window
    }

    pub fn len(&self) -> usize {
        self.state_dim() * self.per_state() + self.state_dim()
    }

    pub fn is_empty(&self) -> bool {
        self.state_dim() == 0
    }

    pub fn curvature_index(&self, state: usize) -> usize {
        state * self.per_state()
    }

    pub fn wavelet_range(&self, state: usize) -> std::ops::Range<usize> {
        let start = state * self.per_state() + 1;
        start..start + self.window
    }

    pub fn error_index(&self, state: usize) -> usize {
        self.state_dim() * self.per_state() + state
    }

    pub fn column_names(&self) -> Vec<String> {
        let plan = WaveletPlan::db2(self.levels);
        let bands = plan.band_lengths(self.window);
        let mut band_names = vec![format!("a{}", self.levels)];
        for l in (1..=self.levels).rev() {
            band_names.push(format!("d{l}"));
        }
        let mut out = Vec::with_capacity(self.len());
        for s in &self.state_names {
            out.push(format!("{s}_curv"));
            for (name, &len) in band_names.iter().zip(&bands) {
                for j in 0..len {
                    out.push(format!("{s}_{name}_{j}"));
                }
            }
        }
        for s in &self.state_names {
            out.push(format!("{s}_err"));
        }
        out
    }
}

/// Which feature groups are kept. Dropped groups are removed from the
/// regression input entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub curvature: bool,
    pub wavelet: bool,
    pub error: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self {
            curvature: true,
            wavelet: true,
            error: true,
        }
    }
}

impl FeatureMask {
    pub fn keep(&self, layout: &FeatureLayout) -> Vec<usize> {
        let mut idx = Vec::new();
        for s in 0..layout.state_dim() {
            if self.curvature {
                idx.push(layout.curvature_index(s));
            }
            if self.wavelet {
                idx.extend(layout.wavelet_range(s));
            }
        }
        if self.error {
            idx.extend((0..layout.state_dim()).map(|s| layout.error_index(s)));
        }
        idx
    }

    pub fn apply(&self, layout: &FeatureLayout, values: &[f64]) -> Vec<f64> {
        self.keep(layout).into_iter().map(|i| values[i]).collect()
    }
}

/// Reference window: one row per step (`𝒯ˡ` rows), one column per state.
pub type ReferenceWindow = DMatrix<f64>;

pub fn extract_features(
    layout: &FeatureLayout,
    window: &ReferenceWindow,
    x_c: &DVector<f64>,
) -> Result<Vec<f64>, FeatureError> {
    let m = layout.state_dim();
    if window.shape() != (layout.window, m) || x_c.len() != m {
        return Err(FeatureError::Dimension(format!(
            "window {:?} and state {} for layout with {m} states over {} steps",
            window.shape(),
            x_c.len(),
            layout.window
        )));
    }
    if window.iter().any(|v| !v.is_finite()) {
        return Err(FeatureError::Invalid("non-finite reference".into()));
    }
    let plan = WaveletPlan::db2(layout.levels);
    let mut out = Vec::with_capacity(layout.len());
    for s in 0..m {
        let col: Vec<f64> = window.column(s).iter().copied().collect();
        out.push(curvature(&col)?);
        out.extend(dwt(&col, &plan)?);
    }
    for s in 0..m {
        out.push((window[(0, s)] - x_c[s]).abs());
    }
    Ok(out)
}

/// Synthesized reference: `states` has `length` rows starting at the initial
/// state; `inputs[k]` drives `states[k] → states[k+1]` (the last row repeats
/// the final input).
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesized {
    pub states: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
}

/// Pieces of a reference alternate between settings every `block` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisSchedule {
    pub phases: Vec<SynthesisSettings>,
    pub block: usize,
}

impl SynthesisSchedule {
    pub fn single(s: SynthesisSettings) -> Self {
        Self {
            phases: vec![s],
            block: usize::MAX,
        }
    }

    fn at(&self, k: usize) -> &SynthesisSettings {
        let idx = if self.block == usize::MAX {
            0
        } else {
            (k / self.block.max(1)) % self.phases.len()
        };
        &self.phases[idx]
    }
}

const SYNTH_ATTEMPTS: usize = 24;

/// Noise-free simulation from the origin under a piecewise-constant random
/// input. Each segment's level is drawn uniformly inside a shrunken input
/// box and held for a geometric dwell, with per-step rate clamping. A
/// segment whose states would leave the state bounds (scaled by
/// `state_margin`) or the optional envelope is redrawn; after repeated
/// failures the least-violating draw is kept.
pub fn synthesize_references(
    model: &DiscreteModel,
    length: usize,
    seed: u64,
    schedule: &SynthesisSchedule,
) -> Result<Synthesized, FeatureError> {
    synthesize_with(
        model,
        &|x, u| &model.a_d * x + &model.b_d * u,
        length,
        seed,
        schedule,
    )
}

/// Same process with a caller-supplied one-step propagation; `model`
/// supplies dimensions and bounds. Used for plants whose true dynamics are
/// nonlinear.
pub fn synthesize_with(
    model: &DiscreteModel,
    step: &dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    length: usize,
    seed: u64,
    schedule: &SynthesisSchedule,
) -> Result<Synthesized, FeatureError> {
    if schedule.phases.is_empty() {
        return Err(FeatureError::Invalid("empty synthesis schedule".into()));
    }
    let (m, n) = (model.state_dim(), model.input_dim());
    let b = &model.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = DMatrix::zeros(length, m);
    let mut inputs = DMatrix::zeros(length, n);
    let mut x = DVector::zeros(m);
    let mut u = DVector::zeros(n);
    let mut k = 0;
    while k < length {
        let cfg = schedule.at(k);
        let p_stop = 1.0 / cfg.mean_dwell.max(1.0);
        let mut dwell = 1;
        while rng.gen::<f64>() >= p_stop && dwell < 10_000 {
            dwell += 1;
        }
        let dwell = dwell.min(length - k);
        let (lo_x, hi_x) = synth_limits(model, cfg);
        let mut best: Option<(f64, DVector<f64>)> = None;
        for _ in 0..SYNTH_ATTEMPTS {
            let level = DVector::from_iterator(
                n,
                (0..n).map(|j| {
                    let (lo, hi) = (b.u_min[j], b.u_max[j]);
                    let (lo, hi) = if lo.is_finite() && hi.is_finite() {
                        let mid = 0.5 * (lo + hi);
                        (
                            mid + (lo - mid) * cfg.input_fraction,
                            mid + (hi - mid) * cfg.input_fraction,
                        )
                    } else {
                        (-cfg.input_fraction, cfg.input_fraction)
                    };
                    if hi > lo {
                        rng.gen_range(lo..=hi)
                    } else {
                        lo
                    }
                }),
            );
            let viol = segment_violation(model, step, &x, &u, &level, dwell, &lo_x, &hi_x);
            if best.as_ref().map_or(true, |(v, _)| viol < *v) {
                best = Some((viol, level));
            }
            if viol == 0.0 {
                break;
            }
        }
        let level = best.expect("at least one attempt").1;
        for _ in 0..dwell {
            states.row_mut(k).copy_from(&x.transpose());
            u = rate_step(model, &u, &level);
            inputs.row_mut(k).copy_from(&u.transpose());
            x = step(&x, &u);
            k += 1;
        }
    }
    Ok(Synthesized { states, inputs })
}

fn synth_limits(model: &DiscreteModel, cfg: &SynthesisSettings) -> (DVector<f64>, DVector<f64>) {
    let m = model.state_dim();
    let b = &model.bounds;
    let mut lo = DVector::from_element(m, f64::NEG_INFINITY);
    let mut hi = DVector::from_element(m, f64::INFINITY);
    for i in 0..m {
        if b.x_min[i].is_finite() {
            lo[i] = b.x_min[i] * cfg.state_margin;
        }
        if b.x_max[i].is_finite() {
            hi[i] = b.x_max[i] * cfg.state_margin;
        }
        if let Some(Some(e)) = cfg.envelope.get(i) {
            lo[i] = lo[i].max(-e);
            hi[i] = hi[i].min(*e);
        }
    }
    (lo, hi)
}

fn rate_step(model: &DiscreteModel, u: &DVector<f64>, target: &DVector<f64>) -> DVector<f64> {
    let b = &model.bounds;
    DVector::from_iterator(
        u.len(),
        (0..u.len()).map(|j| {
            let step = (target[j] - u[j]).clamp(b.du_min[j], b.du_max[j]);
            (u[j] + step).clamp(b.u_min[j], b.u_max[j])
        }),
    )
}

#[allow(clippy::too_many_arguments)]
fn segment_violation(
    model: &DiscreteModel,
    step: &dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    x0: &DVector<f64>,
    u0: &DVector<f64>,
    level: &DVector<f64>,
    steps: usize,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> f64 {
    let mut x = x0.clone();
    let mut u = u0.clone();
    let mut worst = 0.0f64;
    for _ in 0..steps {
        u = rate_step(model, &u, level);
        x = step(&x, &u);
        for i in 0..x.len() {
            worst = worst.max(lo[i] - x[i]).max(x[i] - hi[i]);
        }
    }
    worst
}

/// Writes reference states as CSV with a header of state names.
pub fn write_references<W: Write>(
    w: W,
    names: &[String],
    states: &DMatrix<f64>,
) -> Result<(), FeatureError> {
    if names.len() != states.ncols() {
        return Err(FeatureError::Dimension("header and columns differ".into()));
    }
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(names)?;
    for r in 0..states.nrows() {
        wr.write_record(states.row(r).iter().map(|v| format!("{v:e}")))?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a reference CSV, returning the header and the `rows × m` matrix.
pub fn read_references<R: Read>(r: R) -> Result<(Vec<String>, DMatrix<f64>), FeatureError> {
    let mut rd = csv::Reader::from_reader(r);
    let names: Vec<String> = rd.headers()?.iter().map(|s| s.to_string()).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() != names.len() {
            return Err(FeatureError::Dimension(format!(
                "row {} has {} fields",
                rows + 1,
                rec.len()
            )));
        }
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                FeatureError::Invalid(format!("bad number {field:?} in row {}", rows + 1))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((
        names.clone(),
        DMatrix::from_row_slice(rows, names.len(), &data),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::ConstraintSet;
    use approx::assert_abs_diff_eq;

    #[test]
    fn curvature_of_lines_is_zero() {
        let ramp: Vec<f64> = (0..10).map(|v| v as f64).collect();
        assert_eq!(curvature(&ramp).unwrap(), 0.0);
        assert_eq!(curvature(&[5.0; 8]).unwrap(), 0.0);
        assert!(curvature(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn curvature_matches_scalar_formula() {
        let r: [f64; 6] = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let mut acc = 0.0;
        for k in 0..4 {
            let g = r[k + 1] - r[k];
            let g2 = (r[k + 2] - r[k + 1]) - (r[k + 1] - r[k]);
            acc += g2.abs() / (1.0 + g * g).sqrt().powi(3);
        }
        assert_abs_diff_eq!(curvature(&r).unwrap(), acc / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn filters_are_orthonormal() {
        let p = WaveletPlan::db2(3);
        assert_abs_diff_eq!(p.low.iter().sum::<f64>(), 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.high.iter().sum::<f64>(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            p.low.iter().map(|v| v * v).sum::<f64>(),
            1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            p.low[0] * p.low[2] + p.low[1] * p.low[3],
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn constant_signal_has_no_detail() {
        let p1 = WaveletPlan::db2(1);
        let c = dwt(&[2.5; 8], &p1).unwrap();
        for v in &c[..4] {
            assert_abs_diff_eq!(*v, 2.5 * 2f64.sqrt(), epsilon = 1e-12);
        }
        for v in &c[4..] {
            assert!(v.abs() < 1e-12);
        }
        let c3 = dwt(&[-1.0; 40], &WaveletPlan::db2(3)).unwrap();
        assert!(c3[5..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn impulse_reconstructs() {
        let p = WaveletPlan::db2(1);
        let mut x = vec![0.0; 8];
        x[0] = 1.0;
        let back = idwt(&dwt(&x, &p).unwrap(), &p).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(dwt(&[0.0; 12], &WaveletPlan::db2(3)).is_err());
    }

    #[test]
    fn ramp_matches_explicit_matrix() {
        // level-by-level periodized analysis matrices, multiplied out
        let p = WaveletPlan::db2(3);
        let level_matrix = |n: usize| {
            let mut w = DMatrix::<f64>::zeros(n, n);
            for i in 0..n / 2 {
                for k in 0..4 {
                    w[(i, (2 * i + k) % n)] += p.low[k];
                    w[(n / 2 + i, (2 * i + k) % n)] += p.high[k];
                }
            }
            w
        };
        let embed = |n: usize| {
            let mut e = DMatrix::<f64>::identity(8, 8);
            e.view_mut((0, 0), (n, n)).copy_from(&level_matrix(n));
            e
        };
        let full = embed(2) * embed(4) * embed(8);
        let x = DVector::from_iterator(8, (0..8).map(|v| v as f64));
        let want: DVector<f64> = &full * &x;
        let got = dwt(x.as_slice(), &p).unwrap();
        for i in 0..8 {
            assert_abs_diff_eq!(got[i], want[i], epsilon = 1e-12);
        }
        assert!((full.transpose() * &full - DMatrix::identity(8, 8)).amax() < 1e-12);
    }

    fn layout(m: usize) -> FeatureLayout {
        FeatureLayout::new((0..m).map(|i| format!("s{i}")).collect(), 40, 3).unwrap()
    }

    #[test]
    fn layout_lengths() {
        assert_eq!(layout(4).len(), 168);
        assert_eq!(layout(6).len(), 252);
        assert_eq!(layout(4).column_names().len(), 168);
        assert_eq!(WaveletPlan::db2(3).band_lengths(40), vec![5, 5, 10, 20]);
        let l = layout(4);
        let no_err = FeatureMask {
            error: false,
            ..Default::default()
        };
        assert_eq!(no_err.keep(&l).len(), 168 - 4);
        let no_w = FeatureMask {
            wavelet: false,
            ..Default::default()
        };
        assert_eq!(no_w.keep(&l).len(), 8);
    }

    #[test]
    fn features_of_constant_window() {
        let l = layout(4);
        let w = DMatrix::from_element(40, 4, 0.7);
        let x = DVector::from_element(4, 0.7);
        let f = extract_features(&l, &w, &x).unwrap();
        for s in 0..4 {
            assert_eq!(f[l.curvature_index(s)], 0.0);
            assert!(f[l.wavelet_range(s)][5..].iter().all(|v| v.abs() < 1e-12));
            assert_eq!(f[l.error_index(s)], 0.0);
        }
        let mut xd = x.clone();
        xd[2] += 0.25;
        let g = extract_features(&l, &w, &xd).unwrap();
        assert_abs_diff_eq!(g[l.error_index(2)], 0.25, epsilon = 1e-15);
        assert_eq!(&g[..l.error_index(0)], &f[..l.error_index(0)]);
        assert!(extract_features(&l, &DMatrix::zeros(39, 4), &x).is_err());
    }

    fn integrator() -> DiscreteModel {
        let mut b = ConstraintSet::unbounded(1, 1);
        b.u_min[0] = -1.0;
        b.u_max[0] = 1.0;
        b.du_min[0] = -0.2;
        b.du_max[0] = 0.2;
        b.x_min[0] = -3.0;
        b.x_max[0] = 3.0;
        DiscreteModel {
            a_d: DMatrix::identity(1, 1),
            b_d: DMatrix::from_element(1, 1, 0.05),
            ts: 0.05,
            bounds: b,
        }
    }

    #[test]
    fn synthesis_is_seeded_and_bounded() {
        let m = integrator();
        let sched = SynthesisSchedule::single(SynthesisSettings::default());
        let a = synthesize_references(&m, 500, 3, &sched).unwrap();
        let b = synthesize_references(&m, 500, 3, &sched).unwrap();
        assert_eq!(a, b);
        let mut prev: f64 = 0.0;
        for k in 0..500 {
            let u = a.inputs[(k, 0)];
            assert!((-1.0..=1.0).contains(&u));
            assert!((u - prev).abs() <= 0.2 + 1e-15);
            prev = u;
        }
        let quiet = SynthesisSettings {
            input_fraction: 0.0,
            ..Default::default()
        };
        let z = synthesize_references(&m, 50, 3, &SynthesisSchedule::single(quiet)).unwrap();
        assert!(z.states.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reference_csv_roundtrip() {
        let states = DMatrix::from_row_slice(2, 2, &[0.1, -3.0e-20, 1.0 / 3.0, 7.0]);
        let names = vec!["a".to_string(), "b".to_string()];
        let mut buf = Vec::new();
        write_references(&mut buf, &names, &states).unwrap();
        let (n2, s2) = read_references(buf.as_slice()).unwrap();
        assert_eq!(n2, names);
        assert_eq!(s2, states);
    }
}
