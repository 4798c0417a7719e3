use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vislam::config::Config;
use vislam::estimator::Mode;
use vislam::eval::{compute_ate, compute_rpe, read_tum, EvalMode, Trajectory};
use vislam::experiment::{run_dataset, write_run};
use vislam::sim::{generate, read_dataset, read_gt_csv, write_dataset, SimConfig};
use vislam::Error;

#[derive(Parser)]
#[command(name = "vislam", version, about = "Visual-inertial SLAM backend on simulated data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RunMode {
    Vio,
    Slam,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrajMode {
    Causal,
    Final,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated dataset directory.
    Simulate {
        /// Simulation spec (JSON); defaults are used for missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the estimator over a dataset.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "vio")]
        mode: RunMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a trajectory against ground truth.
    Evaluate {
        /// Estimated trajectory (TUM format).
        #[arg(long)]
        est: PathBuf,
        /// Ground truth: TUM file or a dataset gt.csv.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "causal")]
        mode: TrajMode,
        #[arg(long, value_delimiter = ',', default_values_t = [10.0, 40.0, 90.0, 160.0])]
        rpe_buckets: Vec<f64>,
        #[arg(long, default_value_t = 0.01)]
        association_tolerance: f64,
        /// Output directory for report.json and rpe.csv (default: next to --est).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Diverged | Error::AmbiguousLoop(_) => 4,
        _ => 3,
    }
}

fn load_spec(path: Option<&Path>) -> Result<SimConfig, Error> {
    let Some(p) = path else { return Ok(SimConfig::default()) };
    let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    let cfg: SimConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    cfg.trajectory.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

fn read_gt(path: &Path) -> Result<Trajectory, Error> {
    if path.extension().is_some_and(|e| e == "csv") {
        Ok(read_gt_csv(path)?.into_iter().map(|g| (g.t, g.state.pose())).collect())
    } else {
        read_tum(path)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { spec, seed, out } => {
            let cfg = load_spec(spec.as_deref())?;
            let ds = generate(&cfg, seed)?;
            write_dataset(&ds, &out)?;
            println!("wrote {} frames, {} IMU samples to {}", ds.frames.len(), ds.imu.len(), out.display());
        }
        Command::Run { dataset, config, mode, out } => {
            let cfg = match config {
                Some(p) => Config::load(&p)?,
                None => Config::default(),
            };
            let ds = read_dataset(&dataset)?;
            let mode = match mode {
                RunMode::Vio => Mode::Vio,
                RunMode::Slam => Mode::Slam,
            };
            let result = run_dataset(&ds, &cfg, mode, |_| Ok(()))?;
            write_run(&result, &out)?;
            println!("processed {} frames, {} events; outputs in {}", result.causal.len(), result.events.len(), out.display());
        }
        Command::Evaluate { est, gt, mode, rpe_buckets, association_tolerance, out } => {
            let e = read_tum(&est)?;
            let g = read_gt(&gt)?;
            let mode = match mode {
                TrajMode::Causal => EvalMode::Causal,
                TrajMode::Final => EvalMode::Final,
            };
            if rpe_buckets.iter().any(|b| !(*b > 0.0)) {
                return Err(Error::Config("RPE buckets must be positive".into()));
            }
            let ate = compute_ate(&e, &g, mode, association_tolerance)?;
            let rpe = match compute_rpe(&e, &g, &rpe_buckets, association_tolerance) {
                Ok(r) => Some(r),
                Err(err) => {
                    eprintln!("relative errors skipped: {err}");
                    None
                }
            };
            let dir = out.unwrap_or_else(|| est.parent().map(Path::to_path_buf).unwrap_or_default());
            std::fs::create_dir_all(&dir)?;
            let report = serde_json::json!({ "ate": ate, "rpe": rpe });
            std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            if let Some(r) = &rpe {
                std::fs::write(dir.join("rpe.csv"), r.to_csv())?;
            }
            println!("ATE rmse {:.6} m  mean {:.6}  median {:.6}  max {:.6}  ({} poses)", ate.rmse, ate.mean, ate.median, ate.max, ate.count);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
