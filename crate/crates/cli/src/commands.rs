//! The `gen-data` and `evaluate` commands.

use std::path::Path;

use latsde_core::data::{gen_lorenz, gen_lotka_volterra, gen_predprey4, load_dataset, save_dataset, LorenzConfig, LvConfig, PredPrey4Config};
use latsde_core::encoder::PartitionPlan;
use latsde_core::rng::{KeyedRng, Purpose};
use latsde_core::sdesolve::{NfeCounter, Rk45Config};

use crate::config::Method;
use crate::error::{CliError, Result};
use crate::evaluate::{forecast_latent, forecast_ode, rmse, write_forecast};
use crate::model::{build_drift, build_model};
use crate::train::restore;

/// Generates `system` and writes the full series (training and validation
/// rows together) under `out`.
pub fn gen_data(system: &str, seed: u64, out: &Path, rate_hz: Option<f64>, horizon: Option<f64>) -> Result<()> {
    let g = match system {
        "lotka-volterra" => {
            let mut cfg = LvConfig::default();
            if let Some(r) = rate_hz {
                cfg.rate_hz = r;
            }
            gen_lotka_volterra(&cfg, seed)?
        }
        "lorenz" => {
            let mut cfg = LorenzConfig::default();
            if let Some(t) = horizon {
                cfg.t_end = t;
            }
            gen_lorenz(&cfg, seed)?
        }
        "predprey4" => gen_predprey4(&PredPrey4Config::default(), seed)?,
        other => return Err(CliError::usage(format!("unknown system '{other}'"))),
    };
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    save_dataset(out, &g.full()?, &g.meta)?;
    Ok(())
}

/// Forecasts the rows of `data` after the checkpoint's training period up to
/// `horizon`, writes the forecast CSVs into `out_dir` and returns the RMSE of
/// the predictive mean against the noise-free truth (or the observations when
/// no truth is stored).
pub fn evaluate(ckpt: &Path, data: &Path, horizon: f64, n_paths: usize, out_dir: &Path) -> Result<f64> {
    let r = restore(ckpt)?;
    if horizon <= r.train_end {
        return Err(CliError::usage(format!("horizon {horizon} is not after the end of training ({})", r.train_end)));
    }
    if n_paths == 0 {
        return Err(CliError::usage("paths must be positive"));
    }
    let (full, _) = load_dataset(data)?;
    if full.dim() != r.dim {
        return Err(CliError::usage(format!("dataset has {} columns, model expects {}", full.dim(), r.dim)));
    }
    let (train, rest) = full.split_at_time(r.train_end);
    let (val, _) = rest.split_at_time(horizon);
    if val.is_empty() || train.is_empty() {
        return Err(CliError::usage("dataset has no rows on one side of the end of training"));
    }
    let fc = match r.cfg.method {
        Method::Arcta => {
            let model = build_model(&r.cfg, r.dim)?;
            let parts = train.partition(&PartitionPlan { m: r.cfg.m, k: r.cfg.k })?;
            let mut rng = KeyedRng::new(r.cfg.seed).stream(Purpose::Forecast, u64::MAX, 0);
            forecast_latent(&model, &r.store, parts.last().unwrap(), &val.times, n_paths, r.cfg.val_dt, &mut rng)?
        }
        Method::Node => {
            let drift = build_drift(&r.cfg, r.dim)?;
            let cfg = Rk45Config::new(r.cfg.rtol, r.cfg.atol);
            forecast_ode(&drift, &r.store, r.train_end, train.obs.row_slice(train.len() - 1), &val.times, &cfg, &mut NfeCounter::default())?
        }
    };
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    write_forecast(out_dir, &fc)?;
    Ok(rmse(&fc.mean, val.truth.as_ref().unwrap_or(&val.obs)))
}
