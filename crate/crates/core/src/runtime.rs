//! Closed-loop execution: the adaptive controller, fixed MPC(T,P)
//! baselines, and the comparison experiments built on them.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use web_time::Instant;

use crate::features::{extract_features, FeatureError, FeatureLayout, FeatureMask};
use crate::mpc::{rollout_cost, solve_mpc_with, MpcConfig, MpcError, MpcProblem};
use crate::plant::{add_noise, estimate, ConstraintSet, Plant, PlantError, StateEstimate};
use crate::qp::{QpSettings, QpStatus};
use crate::svr::{round_and_clamp, PairedModels, SvrError, SvrModel};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid run: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Svr(#[from] SvrError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Maps a cycle's feature vector to `(T, P)`.
pub trait HorizonPredictor: Send + Sync {
    fn predict(&self, features: &[f64], t_l: usize) -> Result<(usize, usize), RuntimeError>;
}

/// Always answers the same setting.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub usize, pub usize);

impl HorizonPredictor for ConstantPredictor {
    fn predict(&self, _: &[f64], t_l: usize) -> Result<(usize, usize), RuntimeError> {
        let t = self.0.clamp(2, t_l);
        Ok((t, self.1.clamp(2, t)))
    }
}

/// The trained horizon and sample-count regressors. Without a P model the
/// sample count equals the predicted horizon.
#[derive(Debug, Clone)]
pub struct SvrPredictor {
    pub layout: FeatureLayout,
    pub mask: FeatureMask,
    pub t_model: SvrModel,
    pub p_model: Option<SvrModel>,
    paired: Option<PairedModels>,
}

impl SvrPredictor {
    pub fn new(
        layout: FeatureLayout,
        mask: FeatureMask,
        t_model: SvrModel,
        p_model: Option<SvrModel>,
    ) -> Result<Self, RuntimeError> {
        let d = mask.keep(&layout).len();
        if t_model.input_dim() != d {
            return Err(RuntimeError::Invalid(format!(
                "horizon model expects {} features, layout gives {d}",
                t_model.input_dim()
            )));
        }
        if let Some(p) = &p_model {
            if p.input_dim() != d + 1 {
                return Err(RuntimeError::Invalid(format!(
                    "sample-count model expects {} features, layout gives {d}+1",
                    p.input_dim()
                )));
            }
        }
        let paired = p_model
            .as_ref()
            .and_then(|p| PairedModels::new(&t_model, p));
        Ok(Self {
            layout,
            mask,
            t_model,
            p_model,
            paired,
        })
    }
}

impl HorizonPredictor for SvrPredictor {
    fn predict(&self, features: &[f64], t_l: usize) -> Result<(usize, usize), RuntimeError> {
        let mut x = self.mask.apply(&self.layout, features);
        if let Some(pair) = &self.paired {
            let rounded = |pt: f64| round_and_clamp(pt, 2.0, t_l).0 as f64;
            let (pt, pp) = pair.predict(&x, rounded)?;
            return Ok(round_and_clamp(rounded(pt), pp, t_l));
        }
        let pt = self.t_model.predict(&x)?;
        let (t, _) = round_and_clamp(pt, 2.0, t_l);
        match &self.p_model {
            None => Ok((t, t)),
            Some(pm) => {
                x.push(t as f64);
                let pp = pm.predict(&x)?;
                Ok(round_and_clamp(t as f64, pp, t_l))
            }
        }
    }
}

pub enum Controller<'a> {
    Adaptive(&'a dyn HorizonPredictor),
    Fixed { t: usize, p: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintChoice {
    Normal,
    Tight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub cycles: usize,
    pub seed: u64,
    pub cap: usize,
    pub tol: f64,
    pub noise: bool,
    pub constraints: ConstraintChoice,
    /// Timed comparisons repeat every run this many times, alternating
    /// between controllers, and keep each cycle's fastest solve time.
    #[serde(default = "one")]
    pub timing_repeats: usize,
}

fn one() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cycles: 2000,
            seed: 0,
            cap: 4000,
            tol: 1e-6,
            noise: true,
            constraints: ConstraintChoice::Normal,
            timing_repeats: 1,
        }
    }
}

impl RunConfig {
    pub fn qp_settings(&self) -> QpSettings {
        QpSettings::with_cap(self.cap, self.tol)
    }

    fn bounds<'p>(&self, plant: &'p Plant) -> &'p ConstraintSet {
        match self.constraints {
            ConstraintChoice::Normal => &plant.config.constraints,
            ConstraintChoice::Tight => &plant.config.tight_constraints,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRow {
    pub cycle: usize,
    pub t: usize,
    pub p: usize,
    pub cycle_cost: f64,
    pub solve_time: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub tracking_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub cycles: usize,
    pub e: f64,
    pub mean_solve_time: f64,
    pub sigma: f64,
    pub mean_t: f64,
    pub mean_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<CycleRow>,
    pub summary: RunSummary,
}

impl RunReport {
    fn from_rows(rows: Vec<CycleRow>) -> Self {
        let h = rows.len().max(1) as f64;
        let summary = RunSummary {
            cycles: rows.len(),
            e: rows.iter().map(|r| r.cycle_cost).sum::<f64>() / h,
            mean_solve_time: rows.iter().map(|r| r.solve_time).sum::<f64>() / h,
            sigma: rows
                .iter()
                .filter(|r| r.status == QpStatus::Optimal)
                .count() as f64
                / h,
            mean_t: rows.iter().map(|r| r.t as f64).sum::<f64>() / h,
            mean_p: rows.iter().map(|r| r.p as f64).sum::<f64>() / h,
        };
        Self { rows, summary }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), RuntimeError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "cycle",
            "t",
            "p",
            "cycle_cost",
            "solve_time",
            "status",
            "iterations",
            "tracking_error",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            wr.write_record([
                r.cycle.to_string(),
                r.t.to_string(),
                r.p.to_string(),
                format!("{:e}", r.cycle_cost),
                format!("{:e}", r.solve_time),
                r.status.as_str().to_string(),
                r.iterations.to_string(),
                format!("{:e}", r.tracking_error),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }
}

fn csv_err(e: csv::Error) -> RuntimeError {
    RuntimeError::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}

/// Per-cycle view handed to a closed-loop observer: cycle index, estimated
/// state, and the input applied in the previous cycle.
pub type CycleObserver<'o> = dyn FnMut(usize, &DVector<f64>, &DVector<f64>) + 'o;

fn floor_diag(std: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&std.map(|s| (s * s).max(1e-12)))
}

/// Algorithm-2 loop over `cfg.cycles` cycles. The plant starts on the first
/// reference row; with noise enabled the controller sees a Kalman estimate
/// built from noisy full-state measurements.
pub fn run_loop(
    plant: &Plant,
    controller: &Controller<'_>,
    cfg: &RunConfig,
    refs: &DMatrix<f64>,
) -> Result<RunReport, RuntimeError> {
    run_loop_observed(plant, controller, cfg, refs, &mut |_, _, _| {})
}

pub fn run_loop_observed(
    plant: &Plant,
    controller: &Controller<'_>,
    cfg: &RunConfig,
    refs: &DMatrix<f64>,
    observer: &mut CycleObserver<'_>,
) -> Result<RunReport, RuntimeError> {
    let t_l = plant.config.t_max;
    let (m, n) = (plant.state_dim(), plant.input_dim());
    if refs.ncols() != m {
        return Err(RuntimeError::Invalid(format!(
            "references have {} columns, plant has {m} states",
            refs.ncols()
        )));
    }
    if refs.nrows() + 1 < cfg.cycles + t_l {
        return Err(RuntimeError::Invalid(format!(
            "{} reference rows cannot cover {} cycles with a {t_l}-step window",
            refs.nrows(),
            cfg.cycles
        )));
    }
    if let Controller::Fixed { t, p } = controller {
        if !(2 <= *p && p <= t && *t <= t_l) {
            return Err(RuntimeError::Invalid(format!(
                "fixed setting ({t},{p}) outside 2 <= P <= T <= {t_l}"
            )));
        }
    }
    let layout = FeatureLayout::new(plant.state_names(), t_l, 3)?;
    let mpc_cfg = MpcConfig::new(plant.q_matrix(), plant.r_matrix(), t_l, plant.config.ts)?;
    let settings = cfg.qp_settings();
    let bounds = cfg.bounds(plant);
    let proc_std = plant.process_noise();
    let meas_std = plant.measurement_noise();
    let qn = floor_diag(&proc_std);
    let rn = floor_diag(&meas_std);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut x_true: DVector<f64> = refs.row(0).transpose();
    let mut est = StateEstimate {
        x_hat: x_true.clone(),
        p_cov: rn.clone(),
    };
    let mut u_prev = DVector::zeros(n);
    let mut rows = Vec::with_capacity(cfg.cycles);
    for c in 0..cfg.cycles {
        let x_hat = est.x_hat.clone();
        observer(c, &x_hat, &u_prev);
        let window = refs.rows(c, t_l).into_owned();
        let start = Instant::now();
        let (t, p) = match controller {
            Controller::Fixed { t, p } => (*t, *p),
            Controller::Adaptive(pred) => {
                let feats = extract_features(&layout, &window, &x_hat)?;
                pred.predict(&feats, t_l)?
            }
        };
        let model = plant.model_at(&x_hat, bounds);
        let problem = MpcProblem {
            model,
            x_c: x_hat.clone(),
            refs_x: window.rows(0, t).into_owned(),
            refs_u: DMatrix::zeros(t, n),
            t,
            p,
            u_prev: u_prev.clone(),
        };
        let sol = solve_mpc_with(&problem, &mpc_cfg, &settings)?;
        let solve_time = start.elapsed().as_secs_f64();
        let (u, cycle_cost) = if sol.qp.status == QpStatus::Infeasible {
            let held = DMatrix::from_fn(t, n, |_, j| u_prev[j]);
            (u_prev.clone(), rollout_cost(&problem, &mpc_cfg, &held).1)
        } else {
            (sol.u_first.clone(), sol.cycle_cost)
        };

        x_true = plant.propagate(&x_true, &u);
        if cfg.noise {
            add_noise(&mut x_true, &proc_std, &mut rng);
            let mut y = x_true.clone();
            add_noise(&mut y, &meas_std, &mut rng);
            // LPV matrices at the estimated heading: their step coincides with the
            // nonlinear Euler step and serves as the Jacobian
            let jac = plant.model_at(&est.x_hat, bounds);
            est = estimate(&est, &jac, &u, &y, &qn, &rn)?;
        } else {
            est.x_hat = x_true.clone();
        }
        let next = (c + 1).min(refs.nrows() - 1);
        let err = (&x_true - refs.row(next).transpose()).norm();
        rows.push(CycleRow {
            cycle: c,
            t,
            p,
            cycle_cost,
            solve_time,
            status: sol.qp.status,
            iterations: sol.qp.iterations,
            tracking_error: err,
        });
        u_prev = u;
    }
    Ok(RunReport::from_rows(rows))
}

/// Runs every controller `cfg.timing_repeats` times in alternation. Runs
/// are deterministic apart from the clock, so repeats solve identical
/// problems; each cycle reports its minimum solve time over the repeats.
pub fn run_timed(
    plant: &Plant,
    controllers: &[Controller<'_>],
    cfg: &RunConfig,
    refs: &DMatrix<f64>,
) -> Result<Vec<RunReport>, RuntimeError> {
    let mut best: Vec<Option<Vec<CycleRow>>> = vec![None; controllers.len()];
    for _ in 0..cfg.timing_repeats.max(1) {
        for (slot, c) in best.iter_mut().zip(controllers) {
            let rep = run_loop(plant, c, cfg, refs)?;
            match slot {
                None => *slot = Some(rep.rows),
                Some(rows) => {
                    for (r, new) in rows.iter_mut().zip(rep.rows) {
                        if (r.t, r.p, r.status) != (new.t, new.p, new.status) {
                            return Err(RuntimeError::Invalid(format!(
                                "repeat diverged at cycle {}: ({},{}) vs ({},{})",
                                r.cycle, r.t, r.p, new.t, new.p
                            )));
                        }
                        r.solve_time = r.solve_time.min(new.solve_time);
                    }
                }
            }
        }
    }
    Ok(best
        .into_iter()
        .map(|rows| RunReport::from_rows(rows.unwrap_or_default()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingRow {
    pub reference: String,
    pub t: usize,
    pub p: usize,
    pub e: f64,
    pub mean_solve_time: f64,
    pub sigma: f64,
}

pub const MOTIVATION_SETTINGS: [(usize, usize); 4] = [(40, 40), (5, 5), (40, 3), (40, 25)];

/// Fixed settings MPC(40,40), MPC(5,5), MPC(40,3), MPC(40,25) on each named
/// reference set. Runs are sequential so the timings do not contend.
pub fn motivation_experiment(
    plant: &Plant,
    refs: &[(&str, &DMatrix<f64>)],
    cfg: &RunConfig,
) -> Result<Vec<SettingRow>, RuntimeError> {
    let controllers: Vec<Controller<'_>> = MOTIVATION_SETTINGS
        .iter()
        .map(|&(t, p)| Controller::Fixed { t, p })
        .collect();
    let mut out = Vec::new();
    for (name, r) in refs {
        let reports = run_timed(plant, &controllers, cfg, r)?;
        for ((t, p), rep) in MOTIVATION_SETTINGS.into_iter().zip(reports) {
            out.push(SettingRow {
                reference: name.to_string(),
                t,
                p,
                e: rep.summary.e,
                mean_solve_time: rep.summary.mean_solve_time,
                sigma: rep.summary.sigma,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityRow {
    pub cap: usize,
    pub constraints: ConstraintChoice,
    pub sigma_adaptive: f64,
    pub sigma_fixed: f64,
}

pub fn feasibility_experiment(
    plant: &Plant,
    predictor: &dyn HorizonPredictor,
    refs: &DMatrix<f64>,
    caps: &[usize],
    constraints: ConstraintChoice,
    cfg: &RunConfig,
) -> Result<Vec<FeasibilityRow>, RuntimeError> {
    let t_l = plant.config.t_max;
    let mut out = Vec::new();
    for &cap in caps {
        let run_cfg = RunConfig {
            cap,
            constraints,
            ..cfg.clone()
        };
        let a = run_loop(plant, &Controller::Adaptive(predictor), &run_cfg, refs)?;
        let f = run_loop(plant, &Controller::Fixed { t: t_l, p: t_l }, &run_cfg, refs)?;
        out.push(FeasibilityRow {
            cap,
            constraints,
            sigma_adaptive: a.summary.sigma,
            sigma_fixed: f.summary.sigma,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub e: f64,
    pub mean_solve_time: f64,
    pub mean_t: f64,
    pub mean_p: f64,
}

pub fn ablation_run(
    plant: &Plant,
    variants: &[(String, &dyn HorizonPredictor)],
    refs: &DMatrix<f64>,
    cfg: &RunConfig,
) -> Result<Vec<AblationRow>, RuntimeError> {
    let controllers: Vec<Controller<'_>> = variants
        .iter()
        .map(|(_, p)| Controller::Adaptive(*p))
        .collect();
    let reports = run_timed(plant, &controllers, cfg, refs)?;
    Ok(variants
        .iter()
        .zip(reports)
        .map(|((name, _), rep)| AblationRow {
            variant: name.clone(),
            e: rep.summary.e,
            mean_solve_time: rep.summary.mean_solve_time,
            mean_t: rep.summary.mean_t,
            mean_p: rep.summary.mean_p,
        })
        .collect())
}

/// Writes rows of any serializable table as CSV.
pub fn write_table<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<(), RuntimeError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}
