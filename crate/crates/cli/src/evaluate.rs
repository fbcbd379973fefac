//! Probabilistic forecasts past the end of the training data and their
//! validation RMSE.

use std::fmt::Write as _;
use std::path::Path;

use latsde_core::diffengine::{Array, ParamStore, Tape};
use latsde_core::elbo::LatentSdeModel;
use latsde_core::encoder::Partition;
use latsde_core::models::DriftModel;
use latsde_core::sdesolve::{euler_maruyama_with, rk45_solve, Dispersion, NfeCounter, Rk45Config};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CliError, Result};

/// Forecast at `times`: the predictive mean and every sampled path.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub times: Vec<f64>,
    pub mean: Array,
    /// `paths[p]` is an `N x D` array for path `p`.
    pub paths: Vec<Array>,
}

pub fn rmse(pred: &Array, truth: &Array) -> f64 {
    let n = pred.len().max(1) as f64;
    (pred.as_slice().iter().zip(truth.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt()
}

/// RMSE of the constant predictor equal to the mean of `truth`.
pub fn constant_mean_rmse(truth: &Array) -> f64 {
    let (n, d) = truth.shape();
    let means: Vec<f64> = (0..d).map(|j| (0..n).map(|i| truth[(i, j)]).sum::<f64>() / n as f64).collect();
    rmse(&Array::from_fn(n, d, |_, j| means[j]), truth)
}

/// Time grid from `t0` through every time in `times`, with steps no longer
/// than `dt`, and the grid index of each requested time.
pub fn forecast_grid(t0: f64, times: &[f64], dt: f64) -> (Vec<f64>, Vec<usize>) {
    let mut grid = vec![t0];
    let mut marks = Vec::with_capacity(times.len());
    let mut prev = t0;
    for &t in times {
        let n = ((t - prev) / dt).ceil().max(1.0) as usize;
        for k in 1..n {
            grid.push(prev + (t - prev) * k as f64 / n as f64);
        }
        grid.push(t);
        marks.push(grid.len() - 1);
        prev = t;
    }
    (grid, marks)
}

/// Posterior mean of the diffusion variances.
pub fn diffusion_mean(model: &LatentSdeModel, store: &ParamStore) -> Result<Vec<f64>> {
    let mu = store.value(&model.diffusion.mu_name())?.as_slice().to_vec();
    let ls = store.value(&model.diffusion.log_sigma_name())?.as_slice().to_vec();
    Ok(mu.iter().zip(&ls).map(|(m, l)| (m + 0.5 * (2.0 * l).exp()).exp()).collect())
}

/// Samples `n_paths` latent paths from the encoder's marginal at the end of
/// `last`, runs Euler–Maruyama with the posterior-mean diffusion and decodes
/// them at `times`.
pub fn forecast_latent(model: &LatentSdeModel, store: &ParamStore, last: &Partition, times: &[f64], n_paths: usize, dt: f64, rng: &mut ChaCha8Rng) -> Result<Forecast> {
    let t0 = last.t_end;
    if times.first().is_some_and(|&t| t <= t0) {
        return Err(CliError::usage(format!("forecast times must start after the end of training ({t0})")));
    }
    let d = model.latent_dim();
    let mut tape = Tape::new();
    let mut enc = model.encoder.encode_nodes(&mut tape, store, last)?;
    let mo = model.encoder.interpolate(&mut tape, store, &mut enc, &[t0])?;
    let (m, s) = (tape.value(mo.m).clone(), tape.value(mo.s).clone());
    let z0 = Array::from_fn(n_paths, d, |_, j| {
        let e: f64 = StandardNormal.sample(rng);
        m[(0, j)] + s[(0, j)].sqrt() * e
    });
    let disp = Dispersion::from_c_inv(&diffusion_mean(model, store)?);
    let (grid, marks) = forecast_grid(t0, times, dt);
    let mut recorded = Vec::with_capacity(times.len());
    let mut next = 0;
    euler_maruyama_with(
        |z, t| model.drift.eval_values(store, z, t).map_err(Into::into),
        &disp,
        &z0,
        &grid,
        rng,
        |k, z| {
            if next < marks.len() && marks[next] == k {
                recorded.push(z.clone());
                next += 1;
            }
        },
    )?;
    let decoded: Vec<Array> = recorded
        .into_iter()
        .map(|z| {
            let mut tape = Tape::new();
            let zv = tape.constant(z);
            let x = model.likelihood.decoder.decode(&mut tape, store, zv)?;
            Ok(tape.value(x).clone())
        })
        .collect::<latsde_core::Result<_>>()?;
    let dd = decoded.first().map_or(d, |a| a.cols());
    let mean = Array::from_fn(times.len(), dd, |i, j| (0..n_paths).map(|p| decoded[i][(p, j)]).sum::<f64>() / n_paths as f64);
    let paths = (0..n_paths).map(|p| Array::from_fn(times.len(), dd, |i, j| decoded[i][(p, j)])).collect();
    Ok(Forecast { times: times.to_vec(), mean, paths })
}

/// Deterministic forecast of an ODE model started from `y0` at `t0`.
pub fn forecast_ode(drift: &DriftModel, store: &ParamStore, t0: f64, y0: &[f64], times: &[f64], cfg: &Rk45Config, counter: &mut NfeCounter) -> Result<Forecast> {
    let sol = rk45_solve(
        |t, y, out| {
            let f = drift.eval_values(store, &Array::row(y), t)?;
            out.copy_from_slice(f.as_slice());
            Ok(())
        },
        t0,
        y0,
        *times.last().ok_or_else(|| CliError::usage("no forecast times"))?,
        times,
        cfg,
        counter,
    )?;
    let mean = Array::from_fn(times.len(), y0.len(), |i, j| sol.y[i][j]);
    Ok(Forecast { times: times.to_vec(), paths: vec![mean.clone()], mean })
}

/// Writes `t,x1..xD` for the mean and `path,t,x1..xD` for the samples.
pub fn write_forecast(dir: &Path, fc: &Forecast) -> Result<()> {
    latsde_core::data::write_csv(&dir.join("forecast_mean.csv"), &fc.times, &fc.mean)?;
    let d = fc.mean.cols();
    let mut s = String::from("path,t");
    for j in 1..=d {
        write!(s, ",x{j}").unwrap();
    }
    s.push('\n');
    for (p, path) in fc.paths.iter().enumerate() {
        for (i, t) in fc.times.iter().enumerate() {
            write!(s, "{p},{t:.16e}").unwrap();
            for v in path.row_slice(i) {
                write!(s, ",{v:.16e}").unwrap();
            }
            s.push('\n');
        }
    }
    let p = dir.join("forecast_paths.csv");
    std::fs::write(&p, s).map_err(CliError::io(p))
}
