use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use latsde_cli::config::TrainConfig;
use latsde_cli::{commands, experiments, plot, Result};

#[derive(Parser)]
#[command(name = "latsde", version, about = "Solver-free latent SDE training and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenSystem {
    LotkaVolterra,
    Lorenz,
    Predprey4,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bench {
    Lv,
    Lorenz,
    Mc,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV, ground truth CSV and JSON sidecar).
    GenData {
        system: GenSystem,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output stem; `.csv`, `_truth.csv` and `.json` are appended.
        #[arg(long)]
        out: PathBuf,
        /// Sampling rate override (Lotka–Volterra only).
        #[arg(long)]
        rate_hz: Option<f64>,
        /// Length in seconds (Lorenz only).
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Train a model from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Forecast from a checkpoint and report validation RMSE.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset stem covering the training and validation period.
        #[arg(long)]
        data: PathBuf,
        /// Last forecast time.
        #[arg(long)]
        horizon: f64,
        #[arg(long, default_value_t = 100)]
        paths: usize,
        /// Directory for the forecast CSVs (defaults to the checkpoint's).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run one of the benchmark studies.
    Bench {
        which: Bench,
        #[arg(long)]
        out_dir: PathBuf,
        /// Reduced settings that finish in minutes.
        #[arg(long)]
        quick: bool,
    },
    /// Render columns of a CSV as an SVG line plot.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        logy: bool,
        /// Column for the horizontal axis.
        #[arg(long, default_value = "iter")]
        x: String,
        /// Comma-separated columns to draw (default: every other column).
        #[arg(long)]
        y: Option<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { system, seed, out, rate_hz, horizon } => {
            let system = match system {
                GenSystem::LotkaVolterra => "lotka-volterra",
                GenSystem::Lorenz => "lorenz",
                GenSystem::Predprey4 => "predprey4",
            };
            commands::gen_data(system, seed, &out, rate_hz, horizon)
        }
        Command::Train { config, out_dir } => {
            let cfg = TrainConfig::load(&config)?;
            let out = latsde_cli::train::train(&cfg, Some(&out_dir))?;
            match out.final_val_rmse() {
                Some(r) => println!("final validation RMSE {r:.6e}, cumulative NFE {}", out.cum_nfe()),
                None => println!("cumulative NFE {}", out.cum_nfe()),
            }
            Ok(())
        }
        Command::Evaluate { ckpt, data, horizon, paths, out_dir } => {
            let dir = out_dir.unwrap_or_else(|| ckpt.parent().map(PathBuf::from).unwrap_or_default());
            let rmse = commands::evaluate(&ckpt, &data, horizon, paths, &dir)?;
            println!("validation RMSE {rmse:.6e}");
            Ok(())
        }
        Command::Bench { which, out_dir, quick } => match which {
            Bench::Lv => {
                let opts = if quick { experiments::LvBench::quick() } else { experiments::LvBench::default() };
                let s = experiments::lv_bench(&opts, &out_dir)?;
                println!("{}", s.describe());
                Ok(())
            }
            Bench::Lorenz => {
                let opts = if quick { experiments::LorenzGrad::quick() } else { experiments::LorenzGrad::default() };
                let s = experiments::lorenz_grad(&opts, &out_dir)?;
                println!("{}", s.describe());
                Ok(())
            }
            Bench::Mc => {
                let opts = if quick { experiments::McStudy::quick() } else { experiments::McStudy::default() };
                let s = experiments::mc_study(&opts, &out_dir)?;
                println!("{}", s.describe());
                Ok(())
            }
        },
        Command::Plot { input, out, logy, x, y } => {
            let ys: Option<Vec<String>> = y.map(|s| s.split(',').map(|c| c.trim().to_string()).collect());
            plot::plot_file(&input, &out, &x, ys.as_deref(), logy)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
