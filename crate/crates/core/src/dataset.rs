//! Offline labeling of control cycles with their minimal horizon and sample
//! count, and the resulting `(features, T*, P*)` dataset.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{extract_features, FeatureError, FeatureLayout, FeatureMask};
use crate::mpc::{relative_loss, solve_mpc_with, MpcConfig, MpcError, MpcProblem};
use crate::plant::{DiscreteModel, Plant};
use crate::qp::{QpSettings, QpStatus};
use crate::runtime::{run_loop_observed, Controller, RunConfig, RuntimeError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("baseline MPC({0},{0}) is infeasible")]
    BaselineInfeasible(usize),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Solver and threshold settings of Algorithm 1.
#[derive(Debug, Clone)]
pub struct LabelSettings {
    pub eps: f64,
    pub t_l: usize,
    pub qp: QpSettings,
}

/// Per-step-normalized cost of MPC(t, p) on the cycle, `+∞` when infeasible.
pub fn cycle_cost_at(
    model: &DiscreteModel,
    mpc: &MpcConfig,
    x_c: &DVector<f64>,
    window: &DMatrix<f64>,
    u_prev: &DVector<f64>,
    t: usize,
    p: usize,
    qp: &QpSettings,
) -> Result<f64, DatasetError> {
    let problem = MpcProblem {
        model: model.clone(),
        x_c: x_c.clone(),
        refs_x: window.rows(0, t).into_owned(),
        refs_u: DMatrix::zeros(t, model.input_dim()),
        t,
        p,
        u_prev: u_prev.clone(),
    };
    let sol = solve_mpc_with(&problem, mpc, qp)?;
    Ok(if sol.qp.status == QpStatus::Infeasible {
        f64::INFINITY
    } else {
        sol.cycle_cost
    })
}

/// Algorithm 1: the smallest `T` whose MPC(T,T) cost is within `eps`
/// (relative) of MPC(T_l,T_l), then the smallest `P` at that `T`. Falls
/// back to `T_l` and `T` when no candidate passes.
pub fn label_cycle(
    model: &DiscreteModel,
    mpc: &MpcConfig,
    x_c: &DVector<f64>,
    window: &DMatrix<f64>,
    u_prev: &DVector<f64>,
    s: &LabelSettings,
) -> Result<(usize, usize), DatasetError> {
    if window.nrows() != s.t_l || !(s.eps > 0.0) {
        return Err(DatasetError::Invalid(format!(
            "window has {} rows for T_l={} (eps={})",
            window.nrows(),
            s.t_l,
            s.eps
        )));
    }
    let a = cycle_cost_at(model, mpc, x_c, window, u_prev, s.t_l, s.t_l, &s.qp)?;
    if !a.is_finite() {
        return Err(DatasetError::BaselineInfeasible(s.t_l));
    }
    let mut t_star = s.t_l;
    for t in 2..s.t_l {
        let b = cycle_cost_at(model, mpc, x_c, window, u_prev, t, t, &s.qp)?;
        if relative_loss(b, a) < s.eps {
            t_star = t;
            break;
        }
    }
    let mut p_star = t_star;
    for p in 2..t_star {
        let c = cycle_cost_at(model, mpc, x_c, window, u_prev, t_star, p, &s.qp)?;
        if relative_loss(c, a) < s.eps {
            p_star = p;
            break;
        }
    }
    Ok((t_star, p_star))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub features: Vec<f64>,
    pub t_star: usize,
    pub p_star: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub model: String,
    pub eps: f64,
    pub t_l: usize,
    pub layout: FeatureLayout,
    pub records: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub model: String,
    pub eps: f64,
    pub t_l: usize,
    pub layout: FeatureLayout,
    pub records: Vec<DatasetRecord>,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    T,
    P,
}

impl Dataset {
    /// Regression inputs and targets. The P target sees the masked
    /// features augmented with `t_star`.
    pub fn design(&self, mask: &FeatureMask, target: Target) -> (DMatrix<f64>, DVector<f64>) {
        let keep = mask.keep(&self.layout);
        let extra = usize::from(target == Target::P);
        let d = keep.len() + extra;
        let n = self.records.len();
        let mut x = DMatrix::zeros(n, d);
        let mut y = DVector::zeros(n);
        for (r, rec) in self.records.iter().enumerate() {
            for (c, &j) in keep.iter().enumerate() {
                x[(r, c)] = rec.features[j];
            }
            match target {
                Target::T => y[r] = rec.t_star as f64,
                Target::P => {
                    x[(r, d - 1)] = rec.t_star as f64;
                    y[r] = rec.p_star as f64;
                }
            }
        }
        (x, y)
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            model: self.model.clone(),
            eps: self.eps,
            t_l: self.t_l,
            layout: self.layout.clone(),
            records: self.records.len(),
            skipped: self.skipped,
        }
    }
}

/// One labeled cycle: trajectory index, cycle position, estimated state,
/// previous input.
struct Candidate {
    traj: usize,
    cycle: usize,
    x_hat: DVector<f64>,
    u_prev: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct BuildSettings {
    pub eps: f64,
    pub stride: usize,
    pub workers: usize,
    pub run: RunConfig,
}

/// Labels every `stride`-th cycle of each trajectory. Cycle states come
/// from a closed-loop MPC(T_l,T_l) run tracking the same trajectory.
pub fn build_dataset(
    plant: &Plant,
    trajectories: &[DMatrix<f64>],
    s: &BuildSettings,
) -> Result<Dataset, DatasetError> {
    let t_l = plant.config.t_max;
    let layout = FeatureLayout::new(plant.state_names(), t_l, 3)?;
    if s.stride == 0 {
        return Err(DatasetError::Invalid("stride must be at least 1".into()));
    }
    let mut candidates = Vec::new();
    for (k, traj) in trajectories.iter().enumerate() {
        if traj.nrows() < t_l || traj.ncols() != plant.state_dim() {
            return Err(DatasetError::Invalid(format!(
                "trajectory {k} is {}x{}, need at least {t_l} rows of {} states",
                traj.nrows(),
                traj.ncols(),
                plant.state_dim()
            )));
        }
        let positions = traj.nrows() - t_l + 1;
        let wanted: Vec<usize> = (0..positions).step_by(s.stride).collect();
        let mut states: Vec<Option<(DVector<f64>, DVector<f64>)>> = vec![None; positions];
        let run = RunConfig {
            cycles: positions,
            seed: s.run.seed.wrapping_add(k as u64),
            ..s.run.clone()
        };
        let mut obs = |c: usize, x: &DVector<f64>, u: &DVector<f64>| {
            states[c] = Some((x.clone(), u.clone()));
        };
        run_loop_observed(
            plant,
            &Controller::Fixed { t: t_l, p: t_l },
            &run,
            traj,
            &mut obs,
        )?;
        for c in wanted {
            let (x_hat, u_prev) = states[c].clone().expect("state recorded");
            candidates.push(Candidate {
                traj: k,
                cycle: c,
                x_hat,
                u_prev,
            });
        }
    }
    let mpc = MpcConfig::new(plant.q_matrix(), plant.r_matrix(), t_l, plant.config.ts)?;
    let label_settings = LabelSettings {
        eps: s.eps,
        t_l,
        qp: s.run.qp_settings(),
    };
    let bounds = match s.run.constraints {
        crate::runtime::ConstraintChoice::Normal => &plant.config.constraints,
        crate::runtime::ConstraintChoice::Tight => &plant.config.tight_constraints,
    };
    let label_one = |cand: &Candidate| -> Result<Option<DatasetRecord>, DatasetError> {
        let window = trajectories[cand.traj].rows(cand.cycle, t_l).into_owned();
        let model = plant.model_at(&cand.x_hat, bounds);
        let features = extract_features(&layout, &window, &cand.x_hat)?;
        match label_cycle(
            &model,
            &mpc,
            &cand.x_hat,
            &window,
            &cand.u_prev,
            &label_settings,
        ) {
            Ok((t_star, p_star)) => Ok(Some(DatasetRecord {
                features,
                t_star,
                p_star,
            })),
            Err(DatasetError::BaselineInfeasible(_)) => {
                log::info!(
                    "skipping trajectory {} cycle {}: baseline infeasible",
                    cand.traj,
                    cand.cycle
                );
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };
    let labeled = map_ordered(&candidates, s.workers, label_one)?;
    let skipped = labeled.iter().filter(|r| r.is_none()).count();
    Ok(Dataset {
        model: plant.name().to_string(),
        eps: s.eps,
        t_l,
        layout,
        records: labeled.into_iter().flatten().collect(),
        skipped,
    })
}

#[cfg(feature = "parallel")]
fn map_ordered<T, R, E, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync,
{
    use rayon::prelude::*;
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build();
    match pool {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn map_ordered<T, R, E, F>(items: &[T], _workers: usize, f: F) -> Result<Vec<R>, E>
where
    F: Fn(&T) -> Result<R, E>,
{
    items.iter().map(f).collect()
}

/// Sidecar metadata path: `<csv>.meta.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut wr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = d.layout.column_names();
    header.push("t_star".into());
    header.push("p_star".into());
    wr.write_record(&header)?;
    for rec in &d.records {
        if rec.features.len() != d.layout.len() {
            return Err(DatasetError::Layout(format!(
                "record has {} features, layout has {}",
                rec.features.len(),
                d.layout.len()
            )));
        }
        let mut row: Vec<String> = rec.features.iter().map(|v| format!("{v:e}")).collect();
        row.push(rec.t_star.to_string());
        row.push(rec.p_star.to_string());
        wr.write_record(&row)?;
    }
    wr.flush()?;
    let mut meta = serde_json::to_string_pretty(&d.meta())?;
    meta.push('\n');
    let mut f = File::create(sidecar_path(path))?;
    f.write_all(meta.as_bytes())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let meta: DatasetMeta =
        serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    let mut rd = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut want = meta.layout.column_names();
    want.push("t_star".into());
    want.push("p_star".into());
    let header: Vec<String> = rd.headers()?.iter().map(|s| s.to_string()).collect();
    if header != want {
        let detail = match header.iter().zip(&want).position(|(a, b)| a != b) {
            Some(i) => format!(
                "column {i} is {:?}, sidecar layout expects {:?}",
                header[i], want[i]
            ),
            None => format!(
                "CSV has {} columns, sidecar layout expects {}",
                header.len(),
                want.len()
            ),
        };
        return Err(DatasetError::Layout(detail));
    }
    let d = meta.layout.len();
    let mut records = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| DatasetError::Malformed(format!("row {}: {what}", line + 1));
        if rec.len() != d + 2 {
            return Err(bad("wrong field count"));
        }
        let features = rec
            .iter()
            .take(d)
            .map(|f| f.trim().parse::<f64>().map_err(|_| bad("bad number")))
            .collect::<Result<Vec<_>, _>>()?;
        let t_star: usize = rec[d].trim().parse().map_err(|_| bad("bad t_star"))?;
        let p_star: usize = rec[d + 1].trim().parse().map_err(|_| bad("bad p_star"))?;
        if !(2 <= p_star && p_star <= t_star && t_star <= meta.t_l) {
            return Err(bad("labels outside 2 <= p* <= t* <= T_l"));
        }
        records.push(DatasetRecord {
            features,
            t_star,
            p_star,
        });
    }
    if records.len() != meta.records {
        return Err(DatasetError::Malformed(format!(
            "sidecar lists {} records, CSV has {}",
            meta.records,
            records.len()
        )));
    }
    Ok(Dataset {
        model: meta.model,
        eps: meta.eps,
        t_l: meta.t_l,
        layout: meta.layout,
        records,
        skipped: meta.skipped,
    })
}
