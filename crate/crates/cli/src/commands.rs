use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use armpc::dataset::{
    build_dataset, read_dataset, sidecar_path, write_dataset, BuildSettings, Dataset, Target,
};
use armpc::features::{read_references, write_references, FeatureLayout, FeatureMask};
use armpc::plant::{Plant, PlantConfig};
use armpc::qp::QpStatus;
use armpc::runtime::{
    ablation_run, feasibility_experiment, motivation_experiment, run_loop, run_timed, write_table,
    ConstraintChoice, Controller, HorizonPredictor, RunConfig, RunReport, SvrPredictor,
};
use armpc::svr::{grid_search_cv, train_svr, GridSearchSpec, SvrModel, SvrParams};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::AppError;
use crate::{Cli, Command, Group, LoopArgs, PredictorArgs, TargetArg};

/// Sidecar next to a trained model: what it predicts and from which inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub target: Target,
    pub mask: FeatureMask,
    pub model: String,
    pub t_l: usize,
    pub layout: FeatureLayout,
    pub params: SvrParams,
    pub records: usize,
}

pub fn dispatch(cli: &Cli) -> Result<(), AppError> {
    match &cli.command {
        Command::Synthesize { kind, length, out } => {
            let plant = load_plant(cli)?;
            let len = length.unwrap_or(cli.profile.cycles() + plant.config.t_max);
            let refs = plant.synthesize((*kind).into(), len, cli.seed)?;
            let name = format!("refs_{}.csv", format!("{kind:?}").to_lowercase());
            let path = output(cli, out.as_deref().unwrap_or(Path::new(&name)))?;
            write_references(
                BufWriter::new(File::create(&path)?),
                &plant.state_names(),
                &refs.states,
            )?;
            println!("wrote {} rows to {}", len, path.display());
            Ok(())
        }
        Command::BuildDataset {
            traj,
            eps,
            t_max,
            stride,
            out,
        } => {
            let mut plant = load_plant(cli)?;
            if let Some(t) = t_max {
                let mut cfg = plant.config.clone();
                cfg.t_max = *t;
                plant = Plant::new(cfg)?;
            }
            let trajectories = traj
                .iter()
                .map(|p| read_refs(&plant, p))
                .collect::<Result<Vec<_>, _>>()?;
            let settings = BuildSettings {
                eps: *eps,
                stride: stride.unwrap_or(cli.profile.stride()),
                workers: cli.workers,
                run: RunConfig {
                    seed: cli.seed,
                    ..Default::default()
                },
            };
            let ds = build_dataset(&plant, &trajectories, &settings)?;
            if ds.records.is_empty() {
                return Err(AppError::Numerical(format!(
                    "no cycle could be labeled ({} skipped)",
                    ds.skipped
                )));
            }
            let path = output(cli, out)?;
            write_dataset(&ds, &path)?;
            println!(
                "wrote {} records ({} skipped) to {}",
                ds.records.len(),
                ds.skipped,
                path.display()
            );
            Ok(())
        }
        Command::Train {
            dataset,
            target,
            grid,
            folds,
            params,
            drop,
            out,
        } => {
            let ds = read_dataset(dataset)?;
            if cli.config.is_some() {
                check_layout(&load_plant(cli)?, &ds.layout)?;
            }
            let target = match target {
                TargetArg::T => Target::T,
                TargetArg::P => Target::P,
            };
            let mask = mask_without(drop);
            let base = load_params(params.as_deref())?;
            let grid = match grid {
                None => None,
                Some(g) => {
                    let mut spec: GridSearchSpec =
                        serde_json::from_reader(BufReader::new(File::open(g)?))?;
                    if let Some(f) = folds {
                        spec.folds = *f;
                    }
                    Some(spec)
                }
            };
            let path = output(cli, out)?;
            let (model, meta, cv) = train_target(&ds, target, mask, base, grid.as_ref(), cli.seed)?;
            save_model(&model, &meta, &path)?;
            if let Some(table) = cv {
                let mut cv_path = path.as_os_str().to_owned();
                cv_path.push(".cv.csv");
                write_table(
                    BufWriter::new(File::create(PathBuf::from(cv_path))?),
                    &table,
                )?;
            }
            println!(
                "trained {:?} model: {} support vectors, C={}, tau={}, scale={}, converged={}",
                target,
                model.support_count(),
                meta.params.c_reg,
                meta.params.tau,
                meta.params.kernel.scale(),
                model.converged
            );
            Ok(())
        }
        Command::Run {
            refs,
            fixed,
            svr_t,
            svr_p,
            constraints,
            run,
        } => {
            let plant = load_plant(cli)?;
            let refs = read_refs(&plant, refs)?;
            let mut cfg = loop_config(cli, run, &plant, &refs);
            cfg.constraints = single_choice(*constraints)?;
            let (report, label) = match fixed {
                Some((t, p)) => (
                    run_loop(&plant, &Controller::Fixed { t: *t, p: *p }, &cfg, &refs)?,
                    format!("fixed_{t}_{p}"),
                ),
                None => {
                    let args = PredictorArgs {
                        svr_t: svr_t
                            .clone()
                            .expect("clap requires --svr-t without --fixed"),
                        svr_p: svr_p.clone(),
                    };
                    let pred = load_predictor(&plant, &args)?;
                    (
                        run_loop(&plant, &Controller::Adaptive(&pred), &cfg, &refs)?,
                        "adaptive".to_string(),
                    )
                }
            };
            check_solved(&report, &label)?;
            write_report(cli, &report, &format!("report_{label}.csv"))?;
            write_text(
                &output(cli, Path::new(&format!("summary_{label}.json")))?,
                &report.summary_json(),
            )?;
            print_summary(&label, &report);
            Ok(())
        }
        Command::Motivation {
            slow_refs,
            rapid_refs,
            repeats,
            run,
        } => {
            let plant = load_plant(cli)?;
            let want = run.cycles.unwrap_or(cli.profile.cycles()) + plant.config.t_max;
            let slow = match slow_refs {
                Some(p) => read_refs(&plant, p)?,
                None => {
                    plant
                        .synthesize(armpc::plant::ReferenceKind::Slow, want, cli.seed)?
                        .states
                }
            };
            let rapid = match rapid_refs {
                Some(p) => read_refs(&plant, p)?,
                None => {
                    plant
                        .synthesize(
                            armpc::plant::ReferenceKind::Rapid,
                            want,
                            cli.seed.wrapping_add(1),
                        )?
                        .states
                }
            };
            let shorter = if slow.nrows() <= rapid.nrows() {
                &slow
            } else {
                &rapid
            };
            let cfg = RunConfig {
                timing_repeats: *repeats,
                ..loop_config(cli, run, &plant, shorter)
            };
            let rows = motivation_experiment(&plant, &[("slow", &slow), ("rapid", &rapid)], &cfg)?;
            let path = output(cli, Path::new("motivation.csv"))?;
            write_table(BufWriter::new(File::create(&path)?), &rows)?;
            for r in &rows {
                println!(
                    "{:<6} MPC({},{})  E={:.6e}  mean solve {:.3} ms  sigma {:.3}",
                    r.reference,
                    r.t,
                    r.p,
                    r.e,
                    r.mean_solve_time * 1e3,
                    r.sigma
                );
            }
            Ok(())
        }
        Command::Bench {
            refs,
            predictor,
            repeats,
            run,
        } => {
            let plant = load_plant(cli)?;
            let refs = read_refs(&plant, refs)?;
            let pred = load_predictor(&plant, predictor)?;
            let t_l = plant.config.t_max;
            let cfg = RunConfig {
                timing_repeats: *repeats,
                ..loop_config(cli, run, &plant, &refs)
            };
            let mut reports = run_timed(
                &plant,
                &[
                    Controller::Adaptive(&pred),
                    Controller::Fixed { t: t_l, p: t_l },
                ],
                &cfg,
                &refs,
            )?;
            let fixed = reports.pop().expect("two reports");
            let adaptive = reports.pop().expect("two reports");
            let fixed_label = format!("fixed_{t_l}_{t_l}");
            check_solved(&adaptive, "adaptive")?;
            check_solved(&fixed, &fixed_label)?;
            write_report(cli, &adaptive, "report_adaptive.csv")?;
            write_report(cli, &fixed, &format!("report_{fixed_label}.csv"))?;
            let summary = json!({
                "model": plant.name(),
                "cycles": cfg.cycles,
                "seed": cfg.seed,
                "timing_repeats": cfg.timing_repeats,
                "adaptive": adaptive.summary,
                fixed_label.clone(): fixed.summary,
                "time_ratio": adaptive.summary.mean_solve_time / fixed.summary.mean_solve_time,
                "e_ratio": adaptive.summary.e / fixed.summary.e,
            });
            write_text(&output(cli, Path::new("summary.json"))?, &pretty(&summary)?)?;
            print_summary("adaptive", &adaptive);
            print_summary(&fixed_label, &fixed);
            println!(
                "time ratio {:.3}  E ratio {:.3}",
                adaptive.summary.mean_solve_time / fixed.summary.mean_solve_time,
                adaptive.summary.e / fixed.summary.e
            );
            Ok(())
        }
        Command::Ablation {
            dataset,
            refs,
            params,
            repeats,
            run,
        } => {
            let plant = load_plant(cli)?;
            let refs = read_refs(&plant, refs)?;
            let ds = read_dataset(dataset)?;
            check_layout(&plant, &ds.layout)?;
            let base = load_params(params.as_deref())?;
            let masks = [
                ("full", FeatureMask::default()),
                ("no_wavelet", mask_without(&[Group::Wavelet])),
                ("no_curvature", mask_without(&[Group::Curvature])),
                ("no_error", mask_without(&[Group::Error])),
            ];
            let mut predictors = Vec::new();
            for (name, mask) in masks {
                log::info!("training {name} models on {} records", ds.records.len());
                let (t, _, _) = train_target(&ds, Target::T, mask, base, None, cli.seed)?;
                let (p, _, _) = train_target(&ds, Target::P, mask, base, None, cli.seed)?;
                if name == "full" {
                    predictors.push((
                        "t_only".to_string(),
                        SvrPredictor::new(ds.layout.clone(), mask, t.clone(), None)?,
                    ));
                }
                predictors.push((
                    name.to_string(),
                    SvrPredictor::new(ds.layout.clone(), mask, t, Some(p))?,
                ));
            }
            // full first, t_only last, as in the report
            predictors.sort_by_key(|(n, _)| n == "t_only");
            let variants: Vec<(String, &dyn HorizonPredictor)> = predictors
                .iter()
                .map(|(n, p)| (n.clone(), p as &dyn HorizonPredictor))
                .collect();
            let cfg = RunConfig {
                timing_repeats: *repeats,
                ..loop_config(cli, run, &plant, &refs)
            };
            let rows = ablation_run(&plant, &variants, &refs, &cfg)?;
            let path = output(cli, Path::new("ablation.csv"))?;
            write_table(BufWriter::new(File::create(&path)?), &rows)?;
            for r in &rows {
                println!(
                    "{:<13} E={:.6e}  mean solve {:.3} ms  mean T {:.2}  mean P {:.2}",
                    r.variant,
                    r.e,
                    r.mean_solve_time * 1e3,
                    r.mean_t,
                    r.mean_p
                );
            }
            Ok(())
        }
        Command::Feasibility {
            refs,
            predictor,
            caps,
            constraints,
            cycles,
            tol,
            no_noise,
        } => {
            let plant = load_plant(cli)?;
            let refs = read_refs(&plant, refs)?;
            let pred = load_predictor(&plant, predictor)?;
            if caps.is_empty() || caps.contains(&0) {
                return Err(AppError::Usage(
                    "--caps needs positive iteration caps".into(),
                ));
            }
            let args = LoopArgs {
                cycles: *cycles,
                cap: 1,
                tol: *tol,
                no_noise: *no_noise,
            };
            let cfg = loop_config(cli, &args, &plant, &refs);
            let mut rows = Vec::new();
            for choice in constraints.choices() {
                rows.extend(feasibility_experiment(
                    &plant, &pred, &refs, caps, choice, &cfg,
                )?);
            }
            let path = output(cli, Path::new("feasibility.csv"))?;
            write_table(BufWriter::new(File::create(&path)?), &rows)?;
            for r in &rows {
                println!(
                    "{:<6} cap {:>5}  sigma adaptive {:.3}  fixed {:.3}",
                    format!("{:?}", r.constraints).to_lowercase(),
                    r.cap,
                    r.sigma_adaptive,
                    r.sigma_fixed
                );
            }
            Ok(())
        }
    }
}

fn load_plant(cli: &Cli) -> Result<Plant, AppError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| AppError::Usage("--config <FILE> is required".into()))?;
    Ok(Plant::new(PlantConfig::load(path)?)?)
}

/// Resolves `name` below `--out-dir`, creating the directory on first use.
fn output(cli: &Cli, name: &Path) -> Result<PathBuf, AppError> {
    std::fs::create_dir_all(&cli.out_dir)?;
    Ok(cli.out_dir.join(name))
}

fn write_text(path: &Path, text: &str) -> Result<(), AppError> {
    std::fs::write(path, text)?;
    Ok(())
}

fn pretty(v: &serde_json::Value) -> Result<String, AppError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn read_refs(plant: &Plant, path: &Path) -> Result<DMatrix<f64>, AppError> {
    let (names, states) = read_references(BufReader::new(File::open(path)?))?;
    if names != plant.state_names() {
        return Err(AppError::Data(format!(
            "{}: header {:?} does not match the {} states {:?}",
            path.display(),
            names,
            plant.name(),
            plant.state_names()
        )));
    }
    Ok(states)
}

fn check_layout(plant: &Plant, layout: &FeatureLayout) -> Result<(), AppError> {
    let want = FeatureLayout::new(plant.state_names(), plant.config.t_max, 3)?;
    if *layout != want {
        return Err(AppError::Data(format!(
            "feature layout ({} columns over a {}-step window) does not match the {} config ({} columns over {})",
            layout.len(),
            layout.window,
            plant.name(),
            want.len(),
            want.window
        )));
    }
    Ok(())
}

fn loop_config(cli: &Cli, args: &LoopArgs, plant: &Plant, refs: &DMatrix<f64>) -> RunConfig {
    let available = (refs.nrows() + 1).saturating_sub(plant.config.t_max);
    RunConfig {
        cycles: args
            .cycles
            .unwrap_or_else(|| cli.profile.cycles().min(available)),
        seed: cli.seed,
        cap: args.cap,
        tol: args.tol,
        noise: !args.no_noise,
        ..Default::default()
    }
}

fn single_choice(c: crate::Constraints) -> Result<ConstraintChoice, AppError> {
    match c.choices().as_slice() {
        [one] => Ok(*one),
        _ => Err(AppError::Usage(
            "a single closed-loop run takes --constraints normal or tight".into(),
        )),
    }
}

fn mask_without(drop: &[Group]) -> FeatureMask {
    FeatureMask {
        curvature: !drop.contains(&Group::Curvature),
        wavelet: !drop.contains(&Group::Wavelet),
        error: !drop.contains(&Group::Error),
    }
}

fn load_params(path: Option<&Path>) -> Result<SvrParams, AppError> {
    match path {
        None => Ok(SvrParams::default()),
        Some(p) => Ok(serde_json::from_reader(BufReader::new(File::open(p)?))?),
    }
}

type Trained = (SvrModel, ModelMeta, Option<Vec<armpc::svr::CvRow>>);

fn train_target(
    ds: &Dataset,
    target: Target,
    mask: FeatureMask,
    base: SvrParams,
    grid: Option<&GridSearchSpec>,
    seed: u64,
) -> Result<Trained, AppError> {
    if ds.records.is_empty() {
        return Err(AppError::Data("dataset has no records".into()));
    }
    let (x, y) = ds.design(&mask, target);
    let (params, cv) = match grid {
        None => (base, None),
        Some(spec) => {
            let res = grid_search_cv(&x, &y, spec, &base, seed)?;
            (res.best, Some(res.table))
        }
    };
    let model = train_svr(&x, &y, &params)?;
    if !model.converged {
        log::warn!("SMO stopped at its iteration cap before reaching the KKT tolerance");
    }
    let meta = ModelMeta {
        target,
        mask,
        model: ds.model.clone(),
        t_l: ds.t_l,
        layout: ds.layout.clone(),
        params,
        records: ds.records.len(),
    };
    Ok((model, meta, cv))
}

fn save_model(model: &SvrModel, meta: &ModelMeta, path: &Path) -> Result<(), AppError> {
    model.save(path)?;
    write_text(&sidecar_path(path), &pretty(&serde_json::to_value(meta)?)?)
}

fn load_model(path: &Path) -> Result<(SvrModel, ModelMeta), AppError> {
    let meta_path = sidecar_path(path);
    let meta: ModelMeta = serde_json::from_reader(BufReader::new(
        File::open(&meta_path)
            .map_err(|e| AppError::Data(format!("{}: {e}", meta_path.display())))?,
    ))?;
    Ok((SvrModel::load(path)?, meta))
}

fn load_predictor(plant: &Plant, args: &PredictorArgs) -> Result<SvrPredictor, AppError> {
    let (t_model, t_meta) = load_model(&args.svr_t)?;
    if t_meta.target != Target::T {
        return Err(AppError::Data(format!(
            "{} is not a horizon model",
            args.svr_t.display()
        )));
    }
    check_layout(plant, &t_meta.layout)?;
    let p_model = match &args.svr_p {
        None => None,
        Some(path) => {
            let (m, meta) = load_model(path)?;
            if meta.target != Target::P {
                return Err(AppError::Data(format!(
                    "{} is not a sample-count model",
                    path.display()
                )));
            }
            if meta.mask != t_meta.mask || meta.layout != t_meta.layout {
                return Err(AppError::Data(
                    "horizon and sample-count models were trained on different features".into(),
                ));
            }
            Some(m)
        }
    };
    Ok(SvrPredictor::new(
        t_meta.layout,
        t_meta.mask,
        t_model,
        p_model,
    )?)
}

fn check_solved(report: &RunReport, label: &str) -> Result<(), AppError> {
    if !report.rows.is_empty() && report.rows.iter().all(|r| r.status == QpStatus::Infeasible) {
        return Err(AppError::Numerical(format!(
            "{label}: every cycle was infeasible"
        )));
    }
    if !report.summary.e.is_finite() {
        return Err(AppError::Numerical(format!(
            "{label}: average cost is not finite"
        )));
    }
    Ok(())
}

fn write_report(cli: &Cli, report: &RunReport, name: &str) -> Result<(), AppError> {
    let mut w = BufWriter::new(File::create(output(cli, Path::new(name))?)?);
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn print_summary(label: &str, r: &RunReport) {
    let s = &r.summary;
    println!(
        "{label}: cycles {}  E={:.6e}  mean solve {:.3} ms  sigma {:.3}  mean T {:.2}  mean P {:.2}",
        s.cycles,
        s.e,
        s.mean_solve_time * 1e3,
        s.sigma,
        s.mean_t,
        s.mean_p
    );
}
