mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use armpc::plant::ReferenceKind;
use armpc::runtime::ConstraintChoice;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::AppError;

/// Adaptive regression-based MPC: reference synthesis, horizon labeling,
/// SVR training and closed-loop experiments.
#[derive(Debug, Parser)]
#[command(name = "armpc", version)]
pub struct Cli {
    /// Plant configuration (JSON).
    #[arg(long, global = true, visible_alias = "model")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for dataset labeling.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Every output file is written below this directory.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    #[command(subcommand)]
    pub command: Command,
}

/// `paper`: 2000 cycles per run, every cycle labeled. `desk`: 500 cycles,
/// every second cycle labeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn cycles(self) -> usize {
        match self {
            Profile::Paper => 2000,
            Profile::Desk => 500,
        }
    }

    pub fn stride(self) -> usize {
        match self {
            Profile::Paper => 1,
            Profile::Desk => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Slow,
    Rapid,
    Mixed,
}

impl From<Kind> for ReferenceKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Slow => ReferenceKind::Slow,
            Kind::Rapid => ReferenceKind::Rapid,
            Kind::Mixed => ReferenceKind::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    T,
    P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Group {
    Wavelet,
    Curvature,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Constraints {
    Normal,
    Tight,
    Both,
}

impl Constraints {
    pub fn choices(self) -> Vec<ConstraintChoice> {
        match self {
            Constraints::Normal => vec![ConstraintChoice::Normal],
            Constraints::Tight => vec![ConstraintChoice::Tight],
            Constraints::Both => vec![ConstraintChoice::Normal, ConstraintChoice::Tight],
        }
    }
}

/// Closed-loop settings shared by the experiment subcommands.
#[derive(Debug, Clone, Args)]
pub struct LoopArgs {
    /// Control cycles per run; defaults to the profile's count, shortened
    /// to what the references cover.
    #[arg(long)]
    pub cycles: Option<usize>,
    /// Solver iteration cap.
    #[arg(long, default_value_t = 4000)]
    pub cap: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Run the plant without process or measurement noise.
    #[arg(long)]
    pub no_noise: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PredictorArgs {
    /// Horizon model written by `train --target t`.
    #[arg(long)]
    pub svr_t: PathBuf,
    /// Sample-count model written by `train --target p`; without it P = T.
    #[arg(long)]
    pub svr_p: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a reference trajectory from the configured plant.
    Synthesize {
        #[arg(long, value_enum, default_value_t = Kind::Mixed)]
        kind: Kind,
        /// Rows to generate; defaults to the profile's cycles plus one window.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label cycles of reference trajectories with their minimal (T*, P*).
    BuildDataset {
        /// Reference CSV; repeat for several trajectories.
        #[arg(long, required = true)]
        traj: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        /// Longest horizon; overrides the config's value.
        #[arg(long)]
        t_max: Option<usize>,
        /// Label every k-th cycle; defaults to the profile's stride.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value = "dataset.csv")]
        out: PathBuf,
    },
    /// Train the horizon (t) or sample-count (p) regressor.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        target: TargetArg,
        /// Hyper-parameter grid (JSON with c_grid, tau_grid, scale_grid, folds).
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        /// Base SVR parameters (JSON); the grid overrides C, tau and scale.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Feature group to leave out; repeatable.
        #[arg(long, value_enum)]
        drop: Vec<Group>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One closed-loop run of the adaptive controller or a fixed setting.
    Run {
        #[arg(long)]
        refs: PathBuf,
        /// Fixed setting `T,P` instead of the trained predictors.
        #[arg(long, value_parser = parse_pair, conflicts_with_all = ["svr_t", "svr_p"])]
        fixed: Option<(usize, usize)>,
        #[arg(long, required_unless_present = "fixed")]
        svr_t: Option<PathBuf>,
        #[arg(long)]
        svr_p: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Constraints::Normal)]
        constraints: Constraints,
        #[command(flatten)]
        run: LoopArgs,
    },
    /// Fixed MPC(40,40), MPC(5,5), MPC(40,3), MPC(40,25) on slow and rapid references.
    Motivation {
        /// Slow reference CSV; synthesized from the config when absent.
        #[arg(long)]
        slow_refs: Option<PathBuf>,
        #[arg(long)]
        rapid_refs: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[command(flatten)]
        run: LoopArgs,
    },
    /// Adaptive controller against Fixed(T_l, T_l) on one reference.
    Bench {
        #[arg(long)]
        refs: PathBuf,
        #[command(flatten)]
        predictor: PredictorArgs,
        /// Timing repeats per controller; each cycle keeps its fastest solve.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[command(flatten)]
        run: LoopArgs,
    },
    /// Retrain with each feature group removed and without the P model, then compare.
    Ablation {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[command(flatten)]
        run: LoopArgs,
    },
    /// Fraction of optimal solves for the adaptive and Fixed(T_l, T_l) controllers across iteration caps.
    Feasibility {
        #[arg(long)]
        refs: PathBuf,
        #[command(flatten)]
        predictor: PredictorArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 15, 20, 25, 30, 40, 60, 100, 4000])]
        caps: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Constraints::Both)]
        constraints: Constraints,
        #[arg(long)]
        cycles: Option<usize>,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        no_noise: bool,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected T,P, got {s:?}"))?;
    let t = a.trim().parse().map_err(|_| format!("bad T in {s:?}"))?;
    let p = b.trim().parse().map_err(|_| format!("bad P in {s:?}"))?;
    Ok((t, p))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let AppError::Usage(_) = e {
                eprintln!("\nFor more information, try '--help'.");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
