//! Synthetic time series (Lotka–Volterra, Lorenz, a four-species
//! predator–prey system) and their on-disk format.
//!
//! A dataset is stored as a CSV with header `t,x1,...,xD` and every value
//! written with 17 significant digits, plus a JSON sidecar with the generating
//! parameters. Noise-free ground truth, when known, goes to a second CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffengine::Array;
use crate::encoder::{partition, Partition, PartitionPlan};
use crate::error::{Error, Result};
use crate::models::lorenz_rhs;
use crate::rng::{KeyedRng, Purpose};
use crate::sdesolve::{euler_maruyama_with, rk45_solve, Dispersion, NfeCounter, Rk45Config};

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    pub times: Vec<f64>,
    /// `N x D` noisy observations.
    pub obs: Array,
    /// `N x D` noise-free states, when known.
    pub truth: Option<Array>,
    pub noise_sd: Vec<f64>,
}

impl TimeSeriesDataset {
    pub fn new(times: Vec<f64>, obs: Array, truth: Option<Array>, noise_sd: Vec<f64>) -> Result<Self> {
        if obs.rows() != times.len() {
            return Err(Error::invalid(format!("dataset: {} times but {} rows", times.len(), obs.rows())));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(format!("dataset: times not strictly increasing at row {}", i + 1)));
        }
        if !obs.all_finite() {
            return Err(Error::NonFinite { what: "observations".into() });
        }
        if let Some(t) = &truth {
            if t.shape() != obs.shape() {
                return Err(Error::invalid("dataset: ground truth shape differs from observations"));
            }
        }
        Ok(TimeSeriesDataset { times, obs, truth, noise_sd })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.obs.cols()
    }

    pub fn partition(&self, plan: &PartitionPlan) -> Result<Vec<Partition>> {
        partition(&self.times, &self.obs, plan)
    }

    /// Rows in `[lo, hi)`.
    pub fn slice(&self, lo: usize, hi: usize) -> Self {
        let d = self.dim();
        let take = |a: &Array| Array::from_fn(hi - lo, d, |i, j| a[(lo + i, j)]);
        TimeSeriesDataset { times: self.times[lo..hi].to_vec(), obs: take(&self.obs), truth: self.truth.as_ref().map(take), noise_sd: self.noise_sd.clone() }
    }

    /// Splits into `t <= t_split` and `t > t_split`.
    pub fn split_at_time(&self, t_split: f64) -> (Self, Self) {
        let k = self.times.partition_point(|&t| t <= t_split);
        (self.slice(0, k), self.slice(k, self.len()))
    }
}

/// Generation record written next to a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: String,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
    pub x0: Vec<f64>,
    pub noise_sd: Vec<f64>,
    pub rate_hz: f64,
    pub t_end: f64,
    pub t_train: f64,
    /// Set when the parameter values are our own choice rather than taken
    /// from a published setup.
    pub nonstandard_params: bool,
}

/// A generated system split into training and validation parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub train: TimeSeriesDataset,
    pub val: TimeSeriesDataset,
    pub meta: DatasetMeta,
}

impl Generated {
    /// Training and validation rows back in one dataset.
    pub fn full(&self) -> Result<TimeSeriesDataset> {
        let d = self.train.dim();
        let (a, b) = (self.train.len(), self.val.len());
        let cat = |x: &Array, y: &Array| Array::from_fn(a + b, d, |i, j| if i < a { x[(i, j)] } else { y[(i - a, j)] });
        let truth = match (&self.train.truth, &self.val.truth) {
            (Some(x), Some(y)) => Some(cat(x, y)),
            _ => None,
        };
        let mut times = self.train.times.clone();
        times.extend_from_slice(&self.val.times);
        TimeSeriesDataset::new(times, cat(&self.train.obs, &self.val.obs), truth, self.train.noise_sd.clone())
    }
}

fn add_noise<R: Rng>(truth: &Array, sd: &[f64], rng: &mut R) -> Array {
    let mut obs = truth.clone();
    for i in 0..obs.rows() {
        for (v, s) in obs.row_slice_mut(i).iter_mut().zip(sd) {
            let e: f64 = StandardNormal.sample(rng);
            *v += s * e;
        }
    }
    obs
}

fn sample_times(rate_hz: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / rate_hz).collect()
}

/// `dx = (a x - b x y) dt`, `dy = (d x y - g y) dt` with additive Brownian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct LvConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Diagonal of the Brownian covariance rate.
    pub sigma_diag: [f64; 2],
    pub x0: [f64; 2],
    pub t_end: f64,
    pub t_train: f64,
    pub rate_hz: f64,
    pub noise_sd: f64,
    pub dt: f64,
}

impl Default for LvConfig {
    fn default() -> Self {
        LvConfig {
            alpha: 2.0 / 3.0,
            beta: 4.0 / 3.0,
            gamma: 1.0,
            delta: 1.0,
            sigma_diag: [1e-3, 1e-3],
            x0: [0.9, 0.2],
            t_end: 65.0,
            t_train: 50.0,
            rate_hz: 50.0,
            noise_sd: 0.01,
            dt: 1e-4,
        }
    }
}

impl LvConfig {
    /// `delta x - gamma ln x + beta y - alpha ln y`, constant along noise-free orbits.
    pub fn invariant(&self, x: f64, y: f64) -> f64 {
        self.delta * x - self.gamma * x.ln() + self.beta * y - self.alpha * y.ln()
    }

    pub fn rhs(&self, x: f64, y: f64) -> [f64; 2] {
        [self.alpha * x - self.beta * x * y, self.delta * x * y - self.gamma * y]
    }
}

/// Integer number of `dt` steps between samples at `rate_hz`.
fn steps_per_sample(rate_hz: f64, dt: f64) -> Result<usize> {
    let ratio = 1.0 / (rate_hz * dt);
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-9 * k {
        return Err(Error::invalid(format!("sampling period 1/{rate_hz} is not a whole number of steps of {dt}")));
    }
    Ok(k as usize)
}

pub fn gen_lotka_volterra(cfg: &LvConfig, seed: u64) -> Result<Generated> {
    let every = steps_per_sample(cfg.rate_hz, cfg.dt)?;
    let n_steps = (cfg.t_end / cfg.dt).round() as usize;
    let grid: Vec<f64> = (0..=n_steps).map(|k| k as f64 * cfg.dt).collect();
    let keys = KeyedRng::new(seed);
    let mut path_rng = keys.stream(Purpose::DataPath, 0, 0);
    let disp = if cfg.sigma_diag.iter().all(|&s| s == 0.0) { Dispersion::None } else { Dispersion::Diag(cfg.sigma_diag.iter().map(|s| s.sqrt()).collect()) };
    let mut truth_rows: Vec<f64> = Vec::with_capacity(2 * (n_steps / every + 1));
    euler_maruyama_with(
        |z, t| {
            let (x, y) = (z[(0, 0)], z[(0, 1)]);
            if !(x > 0.0 && y > 0.0) {
                return Err(Error::invalid(format!("Lotka–Volterra population left the positive quadrant at t = {t} (x = {x:e}, y = {y:e}); try another seed")));
            }
            let mut f = Array::zeros(1, 2);
            f.row_slice_mut(0).copy_from_slice(&cfg.rhs(x, y));
            Ok(f)
        },
        &disp,
        &Array::row(&cfg.x0),
        &grid,
        &mut path_rng,
        |k, z| {
            if k % every == 0 {
                truth_rows.extend_from_slice(z.row_slice(0));
            }
        },
    )?;
    let n = truth_rows.len() / 2;
    let truth = Array::from_vec(n, 2, truth_rows);
    let obs = add_noise(&truth, &[cfg.noise_sd; 2], &mut keys.stream(Purpose::DataNoise, 0, 0));
    let full = TimeSeriesDataset::new(sample_times(cfg.rate_hz, n), obs, Some(truth), vec![cfg.noise_sd; 2])?;
    let (train, val) = full.split_at_time(cfg.t_train);
    let params = BTreeMap::from([
        ("alpha".to_string(), cfg.alpha),
        ("beta".to_string(), cfg.beta),
        ("gamma".to_string(), cfg.gamma),
        ("delta".to_string(), cfg.delta),
        ("sigma1".to_string(), cfg.sigma_diag[0]),
        ("sigma2".to_string(), cfg.sigma_diag[1]),
        ("dt".to_string(), cfg.dt),
    ]);
    let meta = DatasetMeta {
        system: "lotka-volterra".into(),
        seed,
        params,
        x0: cfg.x0.to_vec(),
        noise_sd: vec![cfg.noise_sd; 2],
        rate_hz: cfg.rate_hz,
        t_end: cfg.t_end,
        t_train: cfg.t_train,
        nonstandard_params: false,
    };
    Ok(Generated { train, val, meta })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LorenzConfig {
    pub theta: [f64; 3],
    pub x0: [f64; 3],
    pub t_end: f64,
    pub rate_hz: f64,
    pub noise_var: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        LorenzConfig { theta: [10.0, 8.0 / 3.0, 28.0], x0: [8.0, -2.0, 36.05], t_end: 1.0, rate_hz: 200.0, noise_var: 1.0, rtol: 1e-6, atol: 1e-8 }
    }
}

/// Noise-free Lorenz states at `times`.
pub fn lorenz_states(cfg: &LorenzConfig, times: &[f64]) -> Result<Array> {
    let sol = rk45_solve(
        |_, y, out| {
            lorenz_rhs(&cfg.theta, y, out);
            Ok(())
        },
        0.0,
        &cfg.x0,
        *times.last().ok_or_else(|| Error::invalid("no sample times"))?,
        times,
        &Rk45Config::new(cfg.rtol, cfg.atol),
        &mut NfeCounter::default(),
    )?;
    Ok(Array::from_fn(times.len(), 3, |i, j| sol.y[i][j]))
}

/// `rate_hz * t_end` samples starting at 0. The whole series is returned as
/// the training part; the validation part is empty.
pub fn gen_lorenz(cfg: &LorenzConfig, seed: u64) -> Result<Generated> {
    let n = (cfg.rate_hz * cfg.t_end).round() as usize;
    if n < 2 {
        return Err(Error::invalid("Lorenz horizon too short for two samples"));
    }
    let times = sample_times(cfg.rate_hz, n);
    let truth = lorenz_states(cfg, &times)?;
    let sd = cfg.noise_var.sqrt();
    let obs = add_noise(&truth, &[sd; 3], &mut KeyedRng::new(seed).stream(Purpose::DataNoise, 0, 0));
    let train = TimeSeriesDataset::new(times, obs, Some(truth), vec![sd; 3])?;
    let val = train.slice(n, n);
    let params = BTreeMap::from([
        ("sigma".to_string(), cfg.theta[0]),
        ("beta".to_string(), cfg.theta[1]),
        ("rho".to_string(), cfg.theta[2]),
        ("rtol".to_string(), cfg.rtol),
        ("atol".to_string(), cfg.atol),
    ]);
    let meta = DatasetMeta {
        system: "lorenz".into(),
        seed,
        params,
        x0: cfg.x0.to_vec(),
        noise_sd: vec![sd; 3],
        rate_hz: cfg.rate_hz,
        t_end: cfg.t_end,
        t_train: cfg.t_end,
        nonstandard_params: false,
    };
    Ok(Generated { train, val, meta })
}

/// Parameter names of the four-species system, in storage order.
pub const PREDPREY4_PARAMS: [&str; 16] = ["alpha1", "alpha2", "beta1", "beta2", "gamma1", "gamma2", "k1", "k2", "delta1", "delta2", "eps1", "eps2", "xi1", "xi2", "nu1", "nu2"];

/// Two prey `x1, x2` with logistic saturation and two competing predators `y1, y2`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredPrey4Config {
    pub params: [f64; 16],
    pub x0: [f64; 4],
    pub t_end: f64,
    pub t_train: f64,
    pub rate_hz: f64,
    pub noise_sd: f64,
}

impl Default for PredPrey4Config {
    /// Our own parameter values, picked for sustained bounded oscillations.
    fn default() -> Self {
        PredPrey4Config {
            params: [1.05, 1.12, 1.27, 1.0, 0.54, 1.46, 5.07, 8.08, 0.92, 1.13, 0.79, 0.45, 0.14, 0.69, 0.01, 0.03],
            x0: [1.0, 1.0, 0.5, 0.5],
            t_end: 300.0,
            t_train: 240.0,
            rate_hz: 10.0,
            noise_sd: 1e-2,
        }
    }
}

pub fn predprey4_rhs(p: &[f64; 16], u: &[f64], out: &mut [f64]) {
    let [a1, a2, b1, b2, g1, g2, k1, k2, d1, d2, e1, e2, xi1, xi2, n1, n2] = *p;
    let (x1, x2, y1, y2) = (u[0], u[1], u[2], u[3]);
    out[0] = x1 * (a1 - b1 * y1 - g1 * y2) * (1.0 - x1 / k1);
    out[1] = x2 * (a2 - b2 * y1 - g2 * y2) * (1.0 - x2 / k2);
    out[2] = y1 * (-d1 + e1 * x1 + xi1 * x2 - n1 * y2);
    out[3] = y2 * (-d2 + e2 * x1 + xi2 * x2 + n2 * y1);
}

pub fn gen_predprey4(cfg: &PredPrey4Config, seed: u64) -> Result<Generated> {
    let n = (cfg.rate_hz * cfg.t_end).round() as usize;
    let times = sample_times(cfg.rate_hz, n);
    let sol = rk45_solve(
        |_, y, out| {
            predprey4_rhs(&cfg.params, y, out);
            Ok(())
        },
        0.0,
        &cfg.x0,
        times[n - 1],
        &times,
        &Rk45Config::new(1e-8, 1e-10),
        &mut NfeCounter::default(),
    )?;
    let truth = Array::from_fn(n, 4, |i, j| sol.y[i][j]);
    let obs = add_noise(&truth, &[cfg.noise_sd; 4], &mut KeyedRng::new(seed).stream(Purpose::DataNoise, 0, 0));
    let full = TimeSeriesDataset::new(times, obs, Some(truth), vec![cfg.noise_sd; 4])?;
    let (train, val) = full.split_at_time(cfg.t_train);
    let meta = DatasetMeta {
        system: "predprey4".into(),
        seed,
        params: PREDPREY4_PARAMS.iter().zip(cfg.params).map(|(k, v)| (k.to_string(), v)).collect(),
        x0: cfg.x0.to_vec(),
        noise_sd: vec![cfg.noise_sd; 4],
        rate_hz: cfg.rate_hz,
        t_end: cfg.t_end,
        t_train: cfg.t_train,
        nonstandard_params: true,
    };
    Ok(Generated { train, val, meta })
}

/// Writes `t,x1..xD` rows with 17 significant digits.
pub fn write_csv(path: &Path, times: &[f64], values: &Array) -> Result<()> {
    let d = values.cols();
    let mut s = String::from("t");
    for j in 1..=d {
        write!(s, ",x{j}").unwrap();
    }
    s.push('\n');
    for (i, t) in times.iter().enumerate() {
        write!(s, "{t:.16e}").unwrap();
        for v in values.row_slice(i) {
            write!(s, ",{v:.16e}").unwrap();
        }
        s.push('\n');
    }
    Ok(std::fs::write(path, s)?)
}

/// Reads a file written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<(Vec<f64>, Array)> {
    let text = std::fs::read_to_string(path)?;
    let perr = |line: usize, msg: String| Error::Parse { path: path.display().to_string(), line, msg };
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) if !h.trim().is_empty() => h,
        _ => return Err(perr(1, "empty file".into())),
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"t") || cols.len() < 2 || cols[1..].iter().enumerate().any(|(j, c)| *c != format!("x{}", j + 1)) {
        return Err(perr(1, format!("expected header t,x1,...,xD, found '{header}'")));
    }
    let d = cols.len() - 1;
    let (mut times, mut vals) = (Vec::new(), Vec::new());
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(perr(idx + 1, format!("expected {} fields, found {}", d + 1, fields.len())));
        }
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| perr(idx + 1, format!("cannot parse '{}' as a number", f.trim())))?;
            if j == 0 {
                times.push(v);
            } else {
                vals.push(v);
            }
        }
    }
    if times.is_empty() {
        return Err(perr(2, "no data rows".into()));
    }
    let n = times.len();
    Ok((times, Array::from_vec(n, d, vals)))
}

/// Paths used for a dataset stem: observations, ground truth and sidecar.
pub fn dataset_paths(stem: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".csv"), with("_truth.csv"), with(".json"))
}

/// Writes `<stem>.csv`, `<stem>_truth.csv` (if known) and `<stem>.json`.
pub fn save_dataset(stem: &Path, ds: &TimeSeriesDataset, meta: &DatasetMeta) -> Result<()> {
    let (obs, truth, side) = dataset_paths(stem);
    write_csv(&obs, &ds.times, &ds.obs)?;
    if let Some(t) = &ds.truth {
        write_csv(&truth, &ds.times, t)?;
    }
    let json = serde_json::to_string_pretty(meta)?;
    Ok(std::fs::write(&side, json + "\n")?)
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(stem: &Path) -> Result<(TimeSeriesDataset, DatasetMeta)> {
    let (obs_p, truth_p, side) = dataset_paths(stem);
    let (times, obs) = read_csv(&obs_p)?;
    let truth = if truth_p.exists() {
        let (t2, tr) = read_csv(&truth_p)?;
        if t2 != times || tr.shape() != obs.shape() {
            return Err(Error::invalid(format!("{} does not match {}", truth_p.display(), obs_p.display())));
        }
        Some(tr)
    } else {
        None
    };
    let meta: DatasetMeta = if side.exists() {
        let text = std::fs::read_to_string(&side)?;
        serde_json::from_str(&text)?
    } else {
        DatasetMeta::default()
    };
    let ds = TimeSeriesDataset::new(times, obs, truth, meta.noise_sd.clone())?;
    Ok((ds, meta))
}
