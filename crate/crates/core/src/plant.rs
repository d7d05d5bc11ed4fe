//! Plant models: the lateral bicycle model of a vehicle and the planar
//! free-flying robot, Euler discretization, noisy stepping and a Kalman
//! filter with a pluggable Jacobian.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::features::SynthesisSchedule;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("config I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// `ẋ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl ContinuousModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, PlantError> {
        if a.nrows() != a.ncols() || b.nrows() != a.nrows() {
            return Err(PlantError::Dimension(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(PlantError::Invalid("non-finite model entry".into()));
        }
        Ok(Self { a, b })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

fn ser_bounds<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
    let out: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
    out.serialize(s)
}

fn de_lower<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
    let v: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(DVector::from_iterator(
        v.len(),
        v.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)),
    ))
}

fn de_upper<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
    let v: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(DVector::from_iterator(
        v.len(),
        v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)),
    ))
}

/// State, input and per-step input-rate bounds. In JSON an unbounded side is
/// written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    #[serde(serialize_with = "ser_bounds", deserialize_with = "de_lower")]
    pub x_min: DVector<f64>,
    #[serde(serialize_with = "ser_bounds", deserialize_with = "de_upper")]
    pub x_max: DVector<f64>,
    #[serde(serialize_with = "ser_bounds", deserialize_with = "de_lower")]
    pub u_min: DVector<f64>,
    #[serde(serialize_with = "ser_bounds", deserialize_with = "de_upper")]
    pub u_max: DVector<f64>,
    #[serde(serialize_with = "ser_bounds", deserialize_with = "de_lower")]
    pub du_min: DVector<f64>,
    #[serde(serialize_with = "ser_bounds", deserialize_with = "de_upper")]
    pub du_max: DVector<f64>,
}

impl ConstraintSet {
    pub fn unbounded(m: usize, n: usize) -> Self {
        Self {
            x_min: DVector::from_element(m, f64::NEG_INFINITY),
            x_max: DVector::from_element(m, f64::INFINITY),
            u_min: DVector::from_element(n, f64::NEG_INFINITY),
            u_max: DVector::from_element(n, f64::INFINITY),
            du_min: DVector::from_element(n, f64::NEG_INFINITY),
            du_max: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn validate(&self, m: usize, n: usize) -> Result<(), PlantError> {
        let pairs = [
            ("x", &self.x_min, &self.x_max, m),
            ("u", &self.u_min, &self.u_max, n),
            ("du", &self.du_min, &self.du_max, n),
        ];
        for (name, lo, hi, len) in pairs {
            if lo.len() != len || hi.len() != len {
                return Err(PlantError::Dimension(format!(
                    "{name} bounds have lengths {}/{}, expected {len}",
                    lo.len(),
                    hi.len()
                )));
            }
            if lo
                .iter()
                .zip(hi.iter())
                .any(|(a, b)| a.is_nan() || b.is_nan() || a > b)
            {
                return Err(PlantError::Invalid(format!("{name} bounds cross")));
            }
        }
        Ok(())
    }

    /// Table S.III bounds for the vehicle.
    pub fn vehicle_normal() -> Self {
        let inf = f64::INFINITY;
        Self {
            x_min: DVector::from_vec(vec![-0.5, -inf, -PI / 6.0, -inf]),
            x_max: DVector::from_vec(vec![0.5, inf, PI / 6.0, inf]),
            u_min: DVector::from_element(1, -PI / 6.0),
            u_max: DVector::from_element(1, PI / 6.0),
            du_min: DVector::from_element(1, -PI / 12.0),
            du_max: DVector::from_element(1, PI / 12.0),
        }
    }

    /// Table S.IV bounds for the vehicle.
    pub fn vehicle_tight() -> Self {
        let inf = f64::INFINITY;
        Self {
            x_min: DVector::from_vec(vec![-0.05, -inf, -PI / 24.0, -inf]),
            x_max: DVector::from_vec(vec![0.05, inf, PI / 24.0, inf]),
            u_min: DVector::from_element(1, -PI / 6.0),
            u_max: DVector::from_element(1, PI / 6.0),
            du_min: DVector::from_element(1, -PI / 24.0),
            du_max: DVector::from_element(1, PI / 24.0),
        }
    }

    pub fn robot_normal() -> Self {
        let inf = f64::INFINITY;
        Self {
            x_min: DVector::from_vec(vec![-inf, -inf, -inf, -0.2, -0.2, -PI / 12.0]),
            x_max: DVector::from_vec(vec![inf, inf, inf, 0.2, 0.2, PI / 12.0]),
            u_min: DVector::from_element(2, -1.0),
            u_max: DVector::from_element(2, 1.0),
            du_min: DVector::from_element(2, -0.1),
            du_max: DVector::from_element(2, 0.1),
        }
    }

    pub fn robot_tight() -> Self {
        let inf = f64::INFINITY;
        Self {
            x_min: DVector::from_vec(vec![-inf, -inf, -inf, -0.02, -0.02, -PI / 30.0]),
            x_max: DVector::from_vec(vec![inf, inf, inf, 0.02, 0.02, PI / 30.0]),
            u_min: DVector::from_element(2, -1.0),
            u_max: DVector::from_element(2, 1.0),
            du_min: DVector::from_element(2, -0.01),
            du_max: DVector::from_element(2, 0.01),
        }
    }
}

/// Euler-discretized model `x⁺ = A_d x + B_d u` with its constraint set.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub ts: f64,
    pub bounds: ConstraintSet,
}

impl DiscreteModel {
    pub fn state_dim(&self) -> usize {
        self.a_d.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_d.ncols()
    }
}

pub fn discretize(
    c: &ContinuousModel,
    ts: f64,
    bounds: ConstraintSet,
) -> Result<DiscreteModel, PlantError> {
    if !(ts > 0.0) || !ts.is_finite() {
        return Err(PlantError::Invalid(format!(
            "sampling time must be positive, got {ts}"
        )));
    }
    if c.a.iter().chain(c.b.iter()).any(|v| !v.is_finite()) {
        return Err(PlantError::Invalid("non-finite model entry".into()));
    }
    bounds.validate(c.state_dim(), c.input_dim())?;
    let m = c.state_dim();
    Ok(DiscreteModel {
        a_d: DMatrix::identity(m, m) + &c.a * ts,
        b_d: &c.b * ts,
        ts,
        bounds,
    })
}

/// Table S.I parameters; `vx` is the constant longitudinal speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub lf: f64,
    pub lr: f64,
    pub cf: f64,
    pub cr: f64,
    pub vx: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1650.0,
            yaw_inertia: 2650.0,
            lf: 1.1,
            lr: 1.7,
            cf: 55494.0,
            cr: 55494.0,
            vx: 10.0,
        }
    }
}

/// Lateral bicycle model, states `(ẏ, ψ, ψ̇, Y)`, input `δ`.
pub fn vehicle_model(p: &VehicleParams) -> Result<ContinuousModel, PlantError> {
    let all = [p.mass, p.yaw_inertia, p.lf, p.lr, p.cf, p.cr, p.vx];
    if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(PlantError::Invalid(
            "vehicle parameters must be finite and strictly positive".into(),
        ));
    }
    let VehicleParams {
        mass: m,
        yaw_inertia: iz,
        lf,
        lr,
        cf,
        cr,
        vx,
    } = *p;
    let a = -(2.0 * cf + 2.0 * cr) / (m * vx);
    let b = -vx - (2.0 * cf * lf - 2.0 * cr * lr) / (m * vx);
    let c = -(2.0 * lf * cf - 2.0 * lr * cr) / (iz * vx);
    let d = -(2.0 * lf * lf * cf + 2.0 * lr * lr * cr) / (iz * vx);
    let e = 2.0 * cf / m;
    let f = 2.0 * lf * cf / iz;
    #[rustfmt::skip]
    let am = DMatrix::from_row_slice(4, 4, &[
        a,   0.0, b,   0.0,
        0.0, 0.0, 1.0, 0.0,
        c,   0.0, d,   0.0,
        1.0, vx,  0.0, 0.0,
    ]);
    let bm = DMatrix::from_column_slice(4, 1, &[e, 0.0, f, 0.0]);
    ContinuousModel::new(am, bm)
}

/// Free-flying robot constants: `ω̇ = α u₁ − β u₂`, `|uᵢ| ≤ thrust_bound`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    pub alpha: f64,
    pub beta: f64,
    pub thrust_bound: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.2,
            thrust_bound: 1.0,
        }
    }
}

impl RobotParams {
    fn validate(&self) -> Result<(), PlantError> {
        if [self.alpha, self.beta, self.thrust_bound]
            .iter()
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(PlantError::Invalid(
                "robot parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// LPV form of the robot with the input matrix frozen at heading `theta`.
/// States `(x₁, x₂, θ, v₁, v₂, ω)`, inputs `(u₁, u₂)`.
pub fn robot_lpv(p: &RobotParams, theta: f64) -> Result<ContinuousModel, PlantError> {
    p.validate()?;
    if !theta.is_finite() {
        return Err(PlantError::Invalid("heading must be finite".into()));
    }
    let mut a = DMatrix::zeros(6, 6);
    a[(0, 3)] = 1.0;
    a[(1, 4)] = 1.0;
    a[(2, 5)] = 1.0;
    let (s, c) = theta.sin_cos();
    let mut b = DMatrix::zeros(6, 2);
    b[(3, 0)] = c;
    b[(3, 1)] = c;
    b[(4, 0)] = s;
    b[(4, 1)] = s;
    b[(5, 0)] = p.alpha;
    b[(5, 1)] = -p.beta;
    ContinuousModel::new(a, b)
}

/// Nonlinear robot dynamics `ẋ = f(x, u)`.
pub fn robot_derivative(p: &RobotParams, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let thrust = u[0] + u[1];
    let (s, c) = x[2].sin_cos();
    DVector::from_vec(vec![
        x[3],
        x[4],
        x[5],
        thrust * c,
        thrust * s,
        p.alpha * u[0] - p.beta * u[1],
    ])
}

/// `A_d x + B_d u + w`, `w ~ N(0, diag(noise_std²))`.
pub fn step<R: Rng + ?Sized>(
    m: &DiscreteModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    noise_std: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>, PlantError> {
    if x.len() != m.state_dim() || u.len() != m.input_dim() || noise_std.len() != m.state_dim() {
        return Err(PlantError::Dimension(format!(
            "x {}, u {}, noise {} for a {}-state {}-input model",
            x.len(),
            u.len(),
            noise_std.len(),
            m.state_dim(),
            m.input_dim()
        )));
    }
    let mut next = &m.a_d * x + &m.b_d * u;
    add_noise(&mut next, noise_std, rng);
    Ok(next)
}

pub(crate) fn add_noise<R: Rng + ?Sized>(x: &mut DVector<f64>, std: &DVector<f64>, rng: &mut R) {
    for i in 0..x.len() {
        let w: f64 = rng.sample(StandardNormal);
        x[i] += std[i] * w;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub x_hat: DVector<f64>,
    pub p_cov: DMatrix<f64>,
}

/// One predict/update cycle with full-state measurement (`C = I`). The
/// prediction uses the supplied model as the Jacobian, so refreshing the
/// robot's LPV matrices at the current heading gives the extended filter.
pub fn estimate(
    prev: &StateEstimate,
    m: &DiscreteModel,
    u: &DVector<f64>,
    y_meas: &DVector<f64>,
    qn: &DMatrix<f64>,
    rn: &DMatrix<f64>,
) -> Result<StateEstimate, PlantError> {
    let k = m.state_dim();
    if prev.x_hat.len() != k
        || prev.p_cov.shape() != (k, k)
        || y_meas.len() != k
        || qn.shape() != (k, k)
        || rn.shape() != (k, k)
        || u.len() != m.input_dim()
    {
        return Err(PlantError::Dimension(
            "estimator inputs do not match the model".into(),
        ));
    }
    let x_pred = &m.a_d * &prev.x_hat + &m.b_d * u;
    let p_pred = &m.a_d * &prev.p_cov * m.a_d.transpose() + qn;
    let s = &p_pred + rn;
    let s_inv = s
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| s.try_inverse());
    let s_inv = s_inv.ok_or(PlantError::SingularInnovation)?;
    if s_inv.iter().any(|v| !v.is_finite()) {
        return Err(PlantError::SingularInnovation);
    }
    let gain = &p_pred * s_inv;
    let x_hat = &x_pred + &gain * (y_meas - &x_pred);
    let i_k = DMatrix::identity(k, k) - &gain;
    let mut p_cov = &i_k * &p_pred * i_k.transpose() + &gain * rn * gain.transpose();
    p_cov = (&p_cov + p_cov.transpose()) * 0.5;
    Ok(StateEstimate { x_hat, p_cov })
}

/// Model selection in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Vehicle(VehicleParams),
    Robot(RobotParams),
}

/// Reference synthesis settings stored alongside the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSettings {
    /// Mean dwell of the piecewise-constant input draws, in steps.
    pub mean_dwell: f64,
    /// Fraction of the input bound range the random draws span.
    pub input_fraction: f64,
    /// Fraction of the state bounds the synthesized states must stay within.
    pub state_margin: f64,
    /// Optional symmetric limits on otherwise unbounded states.
    #[serde(default)]
    pub envelope: Vec<Option<f64>>,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        Self {
            mean_dwell: 25.0,
            input_fraction: 1.0,
            state_margin: 0.9,
            envelope: Vec::new(),
        }
    }
}

/// Slow and rapid input processes; mixed references alternate between
/// them every `block` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub slow: SynthesisSettings,
    pub rapid: SynthesisSettings,
    pub block: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Slow,
    Rapid,
    Mixed,
}

impl std::str::FromStr for ReferenceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "slow" => Ok(Self::Slow),
            "rapid" => Ok(Self::Rapid),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!(
                "unknown reference kind {other:?} (slow|rapid|mixed)"
            )),
        }
    }
}

/// Complete plant + controller weight configuration, as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub model: ModelSpec,
    pub ts: f64,
    pub constraints: ConstraintSet,
    pub tight_constraints: ConstraintSet,
    pub process_noise_std: Vec<f64>,
    pub measurement_noise_std: Vec<f64>,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub t_max: usize,
    pub synthesis: SynthesisConfig,
}

impl PlantConfig {
    pub fn vehicle_default() -> Self {
        let meas = vec![0.005, 0.002, 0.005, 0.02];
        Self {
            model: ModelSpec::Vehicle(VehicleParams::default()),
            ts: 0.02,
            constraints: ConstraintSet::vehicle_normal(),
            tight_constraints: ConstraintSet::vehicle_tight(),
            process_noise_std: meas.iter().map(|v| v * 0.2).collect(),
            measurement_noise_std: meas,
            q_diag: vec![10.0, 50.0, 10.0, 100.0],
            r_diag: vec![5.0],
            t_max: 40,
            synthesis: SynthesisConfig {
                slow: SynthesisSettings {
                    mean_dwell: 150.0,
                    input_fraction: 0.04,
                    state_margin: 0.9,
                    envelope: vec![None, Some(0.6), None, Some(4.0)],
                },
                rapid: SynthesisSettings {
                    mean_dwell: 25.0,
                    input_fraction: 0.2,
                    state_margin: 0.9,
                    envelope: vec![None, Some(0.6), None, Some(4.0)],
                },
                block: 400,
            },
        }
    }

    pub fn robot_default() -> Self {
        let meas = vec![0.01, 0.01, 0.005, 0.002, 0.002, 0.003];
        Self {
            model: ModelSpec::Robot(RobotParams::default()),
            ts: 0.02,
            constraints: ConstraintSet::robot_normal(),
            tight_constraints: ConstraintSet::robot_tight(),
            process_noise_std: meas.iter().map(|v| v * 0.2).collect(),
            measurement_noise_std: meas,
            q_diag: vec![20.0, 20.0, 50.0, 10.0, 10.0, 20.0],
            r_diag: vec![10.0, 10.0],
            t_max: 40,
            synthesis: SynthesisConfig {
                slow: SynthesisSettings {
                    mean_dwell: 150.0,
                    input_fraction: 0.03,
                    state_margin: 0.9,
                    envelope: vec![Some(2.0), Some(2.0), Some(1.0), None, None, None],
                },
                rapid: SynthesisSettings {
                    mean_dwell: 25.0,
                    input_fraction: 0.1,
                    state_margin: 0.9,
                    envelope: vec![Some(2.0), Some(2.0), Some(1.0), None, None, None],
                },
                block: 400,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self, PlantError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_name(&self) -> &'static str {
        match self.model {
            ModelSpec::Vehicle(_) => "vehicle",
            ModelSpec::Robot(_) => "robot",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.model {
            ModelSpec::Vehicle(_) => 4,
            ModelSpec::Robot(_) => 6,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.model {
            ModelSpec::Vehicle(_) => 1,
            ModelSpec::Robot(_) => 2,
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let (m, n) = (self.state_dim(), self.input_dim());
        if !(self.ts > 0.0) {
            return Err(PlantError::Invalid("ts must be positive".into()));
        }
        match self.model {
            ModelSpec::Vehicle(p) => {
                vehicle_model(&p)?;
            }
            ModelSpec::Robot(p) => p.validate()?,
        }
        self.constraints.validate(m, n)?;
        self.tight_constraints.validate(m, n)?;
        for (name, v, len) in [
            ("process_noise_std", &self.process_noise_std, m),
            ("measurement_noise_std", &self.measurement_noise_std, m),
            ("q_diag", &self.q_diag, m),
            ("r_diag", &self.r_diag, n),
        ] {
            if v.len() != len {
                return Err(PlantError::Dimension(format!(
                    "{name} has length {}, expected {len}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(PlantError::Invalid(format!(
                    "{name} entries must be non-negative"
                )));
            }
        }
        if self.t_max < 2 {
            return Err(PlantError::Invalid("t_max must be at least 2".into()));
        }
        Ok(())
    }
}

/// Runtime view of a configured plant.
#[derive(Debug, Clone)]
pub struct Plant {
    pub config: PlantConfig,
    vehicle: Option<ContinuousModel>,
}

impl Plant {
    pub fn new(config: PlantConfig) -> Result<Self, PlantError> {
        config.validate()?;
        let vehicle = match config.model {
            ModelSpec::Vehicle(p) => Some(vehicle_model(&p)?),
            ModelSpec::Robot(_) => None,
        };
        Ok(Self { config, vehicle })
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn name(&self) -> &'static str {
        self.config.model_name()
    }

    pub fn state_names(&self) -> Vec<String> {
        let names: &[&str] = match self.config.model {
            ModelSpec::Vehicle(_) => &["lat_vel", "yaw", "yaw_rate", "lat_pos"],
            ModelSpec::Robot(_) => &["x1", "x2", "theta", "v1", "v2", "omega"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Prediction model for a cycle whose state estimate is `x`. The
    /// vehicle is time invariant; the robot's input matrix is refreshed at
    /// the estimated heading.
    pub fn model_at(&self, x: &DVector<f64>, bounds: &ConstraintSet) -> DiscreteModel {
        let c = match (&self.vehicle, self.config.model) {
            (Some(c), _) => c.clone(),
            (None, ModelSpec::Robot(p)) => robot_lpv(&p, x[2]).expect("validated robot params"),
            (None, ModelSpec::Vehicle(_)) => unreachable!("vehicle model built at construction"),
        };
        discretize(&c, self.config.ts, bounds.clone()).expect("validated config")
    }

    /// Noise-free true plant propagation over one sampling interval. The
    /// robot uses its nonlinear dynamics.
    pub fn propagate(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match (&self.vehicle, self.config.model) {
            (Some(c), _) => x + (&c.a * x + &c.b * u) * self.config.ts,
            (None, ModelSpec::Robot(p)) => x + robot_derivative(&p, x, u) * self.config.ts,
            (None, ModelSpec::Vehicle(_)) => unreachable!(),
        }
    }

    /// Slow, rapid, or alternating (`mixed`) reference of `length` rows,
    /// simulated on the true dynamics from the origin.
    pub fn synthesize(
        &self,
        kind: ReferenceKind,
        length: usize,
        seed: u64,
    ) -> Result<crate::features::Synthesized, crate::features::FeatureError> {
        let s = &self.config.synthesis;
        let schedule = match kind {
            ReferenceKind::Slow => SynthesisSchedule::single(s.slow.clone()),
            ReferenceKind::Rapid => SynthesisSchedule::single(s.rapid.clone()),
            ReferenceKind::Mixed => SynthesisSchedule {
                phases: vec![s.slow.clone(), s.rapid.clone()],
                block: s.block,
            },
        };
        let m = self.state_dim();
        let model = self.model_at(&DVector::zeros(m), &self.config.constraints);
        crate::features::synthesize_with(
            &model,
            &|x, u| self.propagate(x, u),
            length,
            seed,
            &schedule,
        )
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.config.q_diag.clone()))
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.config.r_diag.clone()))
    }

    pub fn process_noise(&self) -> DVector<f64> {
        DVector::from_vec(self.config.process_noise_std.clone())
    }

    pub fn measurement_noise(&self) -> DVector<f64> {
        DVector::from_vec(self.config.measurement_noise_std.clone())
    }
}
