//! Training loops for the amortized latent SDE and the solver baseline.

use std::path::Path;

use latsde_core::data::TimeSeriesDataset;
use latsde_core::diffengine::{checkpoint, Array, ParamStore, Tape};
use latsde_core::elbo::{loss_and_grad, LatentSdeModel, McConfig, ObjectiveConfig};
use latsde_core::encoder::{Partition, PartitionPlan};
use latsde_core::rng::{KeyedRng, Purpose};
use latsde_core::sdesolve::{node_train_step, NfeCounter, Rk45Config, Window};
use rand::Rng;

use crate::adam::AdamState;
use crate::config::{Method, TrainConfig};
use crate::error::{CliError, Result};
use crate::evaluate::{forecast_latent, forecast_ode, rmse};
use crate::metrics::{self, MetricsRow};
use crate::model::{build_drift, build_model, init_drift, init_params, load_data};

/// Step budget for one baseline solve; exceeding it is recorded, not fatal.
const NODE_MAX_STEPS: usize = 20_000;

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub store: ParamStore,
    pub train_end: f64,
}

impl RunOutput {
    pub fn final_val_rmse(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_rmse)
    }

    pub fn cum_nfe(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.cum_nfe)
    }
}

/// Called after each backward pass with the iteration and the store holding
/// the fresh gradients, before the optimizer step.
pub type GradHook<'a> = dyn FnMut(u64, &ParamStore) + 'a;

/// Loads or generates the data named by `cfg` and trains on it.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    let (train, val) = load_data(cfg)?;
    train_on(cfg, &train, val.as_ref(), out_dir, &mut |_, _| {})
}

pub fn train_on(cfg: &TrainConfig, train: &TimeSeriesDataset, val: Option<&TimeSeriesDataset>, out_dir: Option<&Path>, hook: &mut GradHook<'_>) -> Result<RunOutput> {
    cfg.validate().map_err(CliError::usage)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let p = dir.join("config.txt");
        std::fs::write(&p, cfg.to_text()).map_err(CliError::io(p))?;
    }
    let out = match cfg.method {
        Method::Arcta => train_arcta(cfg, train, val, out_dir, hook)?,
        Method::Node => train_node(cfg, train, val, out_dir, hook)?,
    };
    if let Some(dir) = out_dir {
        metrics::write_csv(&dir.join("metrics.csv"), &out.rows)?;
        save_checkpoint(&dir.join("checkpoint.bin"), cfg, &out.store, cfg.iters, out.train_end, train.dim())?;
    }
    Ok(out)
}

fn save_checkpoint(path: &Path, cfg: &TrainConfig, store: &ParamStore, step: u64, train_end: f64, dim: usize) -> Result<()> {
    let extra = serde_json::json!({ "config": cfg.to_text(), "train_end": train_end, "dim": dim });
    checkpoint::save(path, store, step, KeyedRng::new(cfg.seed), extra)?;
    Ok(())
}

fn periodic_checkpoint(cfg: &TrainConfig, out_dir: Option<&Path>, iter: u64, store: &ParamStore, train_end: f64, dim: usize) -> Result<()> {
    match out_dir {
        Some(dir) if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 && iter + 1 < cfg.iters => {
            save_checkpoint(&dir.join(format!("ckpt_{:06}.bin", iter + 1)), cfg, store, iter + 1, train_end, dim)
        }
        _ => Ok(()),
    }
}

fn validation_due(cfg: &TrainConfig, iter: u64) -> bool {
    cfg.val_every > 0 && ((iter + 1) % cfg.val_every == 0 || iter + 1 == cfg.iters)
}

fn truth_of(ds: &TimeSeriesDataset) -> &Array {
    ds.truth.as_ref().unwrap_or(&ds.obs)
}

/// Indices of the partitions used at `iter`: all of them when the batch covers
/// the data, else a uniform draw without replacement.
pub fn batch_indices(keys: &KeyedRng, iter: u64, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut rng = keys.stream(Purpose::Batch, iter, 0);
    let mut idx = rand::seq::index::sample(&mut rng, n, batch).into_vec();
    idx.sort_unstable();
    idx
}

pub fn objective(cfg: &TrainConfig) -> ObjectiveConfig {
    let mut mc = McConfig::new(cfg.r, cfg.s);
    mc.stratified = cfg.stratified;
    mc.warmup = cfg.warmup;
    let mut obj = ObjectiveConfig::new(mc);
    obj.scaling = cfg.scaling;
    obj.warmup_residual = cfg.warmup_residual;
    obj
}

/// Validation RMSE of the latent model forecast from the last training window.
/// A forecast that leaves the finite range scores infinity.
pub fn latent_val_rmse(cfg: &TrainConfig, model: &LatentSdeModel, store: &ParamStore, last: &Partition, val: &TimeSeriesDataset, iter: u64) -> Result<f64> {
    let mut rng = KeyedRng::new(cfg.seed).stream(Purpose::Forecast, iter, 0);
    match forecast_latent(model, store, last, &val.times, cfg.val_paths, cfg.val_dt, &mut rng) {
        Ok(fc) => Ok(rmse(&fc.mean, truth_of(val))),
        Err(CliError::Core(latsde_core::Error::NonFiniteState { t, .. })) => {
            log::warn!("validation forecast diverged at t = {t} (iteration {iter})");
            Ok(f64::INFINITY)
        }
        Err(e) => Err(e),
    }
}

fn train_arcta(cfg: &TrainConfig, train: &TimeSeriesDataset, val: Option<&TimeSeriesDataset>, out_dir: Option<&Path>, hook: &mut GradHook<'_>) -> Result<RunOutput> {
    let model = build_model(cfg, train.dim())?;
    let mut store = init_params(cfg, &model)?;
    let parts = train.partition(&PartitionPlan { m: cfg.m, k: cfg.k })?;
    let last = parts.last().expect("partition of non-empty data").clone();
    let keys = KeyedRng::new(cfg.seed);
    let obj = objective(cfg);
    let mut adam = AdamState::new(cfg.lr, cfg.lr_decay);
    let mut rows = Vec::with_capacity(cfg.iters as usize);
    let mut cum_nfe = 0;
    for iter in 0..cfg.iters {
        let batch: Vec<&Partition> = batch_indices(&keys, iter, parts.len(), cfg.batch).into_iter().map(|i| &parts[i]).collect();
        store.zero_grads();
        let rep = loss_and_grad(&mut store, &model, &batch, train.len(), parts.len(), iter, &obj, &keys)?;
        hook(iter, &store);
        let lr = adam.lr();
        adam.update(&mut store);
        cum_nfe += rep.nfe;
        let val_rmse = match val {
            Some(v) if validation_due(cfg, iter) => Some(latent_val_rmse(cfg, &model, &store, &last, v, iter)?),
            _ => None,
        };
        rows.push(MetricsRow {
            iter,
            cum_nfe,
            elbo: Some(rep.elbo),
            ll_term: Some(rep.ll_term),
            res_term: Some(rep.res_term),
            kl_theta: Some(rep.kl_theta),
            lr,
            kl_weight: Some(rep.kl_weight),
            val_rmse,
        });
        periodic_checkpoint(cfg, out_dir, iter, &store, last.t_end, train.dim())?;
    }
    Ok(RunOutput { rows, store, train_end: last.t_end })
}

fn train_node(cfg: &TrainConfig, train: &TimeSeriesDataset, val: Option<&TimeSeriesDataset>, out_dir: Option<&Path>, hook: &mut GradHook<'_>) -> Result<RunOutput> {
    let (n, d) = (train.len(), train.dim());
    if cfg.node_window < 2 || cfg.node_window > n {
        return Err(CliError::usage(format!("node_window must lie in 2..={n}")));
    }
    let drift = build_drift(cfg, d)?;
    let mut store = ParamStore::new();
    init_drift(cfg, &drift, &mut store)?;
    let keys = KeyedRng::new(cfg.seed);
    let solver = Rk45Config { max_steps: NODE_MAX_STEPS, ..Rk45Config::new(cfg.rtol, cfg.atol) };
    let mut adam = AdamState::new(cfg.lr, cfg.lr_decay);
    let train_end = train.times[n - 1];
    let mut rows = Vec::with_capacity(cfg.iters as usize);
    let mut cum_nfe = 0;
    for iter in 0..cfg.iters {
        let mut rng = keys.stream(Purpose::Batch, iter, 0);
        let windows: Vec<Window> = (0..cfg.node_batch)
            .map(|_| {
                let s = rng.random_range(0..=n - cfg.node_window);
                let w = train.slice(s, s + cfg.node_window);
                Window { times: w.times, obs: w.obs }
            })
            .collect();
        let mut counter = NfeCounter::default();
        let mut tape = Tape::new();
        store.zero_grads();
        let loss = match node_train_step(&mut tape, &store, &drift, &windows, &solver, &mut counter) {
            Ok(loss) => {
                tape.backward(loss, 1.0, &mut store)?;
                hook(iter, &store);
                Some(tape.value(loss).item())
            }
            Err(e) => {
                log::warn!("baseline step {iter} failed: {e}");
                None
            }
        };
        let lr = adam.lr();
        if loss.is_some() {
            adam.update(&mut store);
        } else {
            adam.skip();
        }
        cum_nfe += counter.count();
        let val_rmse = match val {
            Some(v) if validation_due(cfg, iter) => {
                let y0 = train.obs.row_slice(n - 1);
                match forecast_ode(&drift, &store, train_end, y0, &v.times, &solver, &mut NfeCounter::default()) {
                    Ok(fc) => Some(rmse(&fc.mean, truth_of(v))),
                    Err(e) => {
                        log::warn!("baseline validation at {iter} failed: {e}");
                        None
                    }
                }
            }
            _ => None,
        };
        rows.push(MetricsRow { iter, cum_nfe, elbo: loss.map(|l| -l), lr, val_rmse, ..Default::default() });
        periodic_checkpoint(cfg, out_dir, iter, &store, train_end, d)?;
    }
    Ok(RunOutput { rows, store, train_end })
}

/// A trained model restored from a checkpoint.
pub struct Restored {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub train_end: f64,
    pub dim: usize,
}

pub fn restore(path: &Path) -> Result<Restored> {
    let (store, manifest) = checkpoint::load(path)?;
    let text = manifest.extra["config"].as_str().ok_or_else(|| CliError::usage("checkpoint has no configuration"))?;
    let cfg = TrainConfig::parse(text, path)?;
    let train_end = manifest.extra["train_end"].as_f64().ok_or_else(|| CliError::usage("checkpoint has no training end time"))?;
    let dim = manifest.extra["dim"].as_u64().ok_or_else(|| CliError::usage("checkpoint has no dimension"))? as usize;
    Ok(Restored { cfg, store, train_end, dim })
}
