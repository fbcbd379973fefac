//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. The `system` key selects a
//! preset first, and every other key then overrides one preset field, so the
//! order of lines does not matter. Unknown keys and repeated keys are errors.
//!
//! | key | meaning |
//! |-----|---------|
//! | `system` | `lotka-volterra`, `lorenz`, `predprey4` or `generic` |
//! | `method` | `arcta` (amortized ELBO) or `node` (solver baseline) |
//! | `data` | dataset stem to load; generated from `data_seed` when absent |
//! | `data_seed`, `seed` | dataset and training seeds |
//! | `iters` | training iterations |
//! | `m`, `k` | partition length and encoder look-ahead |
//! | `r`, `s` | outer and inner Monte Carlo sample counts |
//! | `batch` | partitions per iteration (clamped to the number available) |
//! | `lr`, `lr_decay` | initial learning rate and per-iteration decay factor |
//! | `warmup` | iterations of linear KL warmup |
//! | `warmup_residual` | whether the warmup weight also multiplies the residual term |
//! | `stratified` | stratified time samples |
//! | `scaling` | `windows` or `observations` |
//! | `interp` | `regularized` or `literal` kernel interpolation |
//! | `kernel_ell`, `kernel_sigma_f`, `kernel_sigma_n` | deep-kernel initial values |
//! | `prior_mu`, `prior_sigma` | log-normal diffusion prior |
//! | `post_mu`, `post_sigma` | initial log-normal diffusion posterior |
//! | `likelihood_sd` | observation noise SD of the likelihood |
//! | `rate_hz` | sampling rate of generated Lotka–Volterra data |
//! | `horizon` | length of generated Lorenz data in seconds |
//! | `t_train` | training/validation split time of a loaded dataset |
//! | `val_every`, `val_paths`, `val_dt`, `val_horizon` | validation cadence, forecast paths, EM step, seconds of validation data used (0 = all) |
//! | `rtol`, `atol`, `node_window`, `node_batch` | baseline solver tolerances, window length and windows per step |
//! | `checkpoint_every` | iterations between checkpoints (0 = only at the end) |
//! | `precision` | floating-point width; only `f64` is supported |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use latsde_core::elbo::Scaling;
use latsde_core::encoder::InterpForm;

use crate::adam::default_decay;
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum System {
    LotkaVolterra,
    Lorenz,
    PredPrey4,
    Generic,
}

impl FromStr for System {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lotka-volterra" | "lv" => Ok(System::LotkaVolterra),
            "lorenz" => Ok(System::Lorenz),
            "predprey4" => Ok(System::PredPrey4),
            "generic" => Ok(System::Generic),
            _ => Err(format!("unknown system '{s}'")),
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            System::LotkaVolterra => "lotka-volterra",
            System::Lorenz => "lorenz",
            System::PredPrey4 => "predprey4",
            System::Generic => "generic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Arcta,
    Node,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "arcta" => Ok(Method::Arcta),
            "node" => Ok(Method::Node),
            _ => Err(format!("unknown method '{s}'")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Arcta => "arcta",
            Method::Node => "node",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub system: System,
    pub method: Method,
    pub data: Option<PathBuf>,
    pub data_seed: u64,
    pub seed: u64,
    pub iters: u64,
    pub m: usize,
    pub k: usize,
    pub r: usize,
    pub s: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub warmup: u64,
    pub warmup_residual: bool,
    pub stratified: bool,
    pub scaling: Scaling,
    pub interp: InterpForm,
    pub kernel_ell: f64,
    pub kernel_sigma_f: f64,
    pub kernel_sigma_n: f64,
    pub prior_mu: f64,
    pub prior_sigma: f64,
    pub post_mu: f64,
    pub post_sigma: f64,
    pub likelihood_sd: f64,
    pub rate_hz: f64,
    pub horizon: f64,
    pub t_train: Option<f64>,
    pub val_every: u64,
    pub val_paths: usize,
    pub val_dt: f64,
    pub val_horizon: f64,
    pub rtol: f64,
    pub atol: f64,
    pub node_window: usize,
    pub node_batch: usize,
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn preset(system: System) -> Self {
        let base = TrainConfig {
            system,
            method: Method::Arcta,
            data: None,
            data_seed: 0,
            seed: 0,
            iters: 20_000,
            m: 256,
            k: 0,
            r: 1,
            s: 10,
            batch: 1,
            lr: 1e-3,
            lr_decay: default_decay(),
            warmup: 1000,
            warmup_residual: true,
            stratified: true,
            scaling: Scaling::Windows,
            interp: InterpForm::Regularized,
            kernel_ell: 1e-2,
            kernel_sigma_f: 1.0,
            kernel_sigma_n: 1e-5,
            prior_mu: 1.0,
            prior_sigma: 1.0,
            post_mu: 1e-5,
            post_sigma: 1e-5,
            likelihood_sd: 0.01,
            rate_hz: 50.0,
            horizon: 1.0,
            t_train: None,
            val_every: 100,
            val_paths: 32,
            val_dt: 1e-2,
            val_horizon: 0.0,
            rtol: 1e-5,
            atol: 1e-5,
            node_window: 256,
            node_batch: 1,
            checkpoint_every: 0,
        };
        match system {
            System::LotkaVolterra | System::Generic => base,
            System::Lorenz => TrainConfig {
                iters: 2000,
                m: 128,
                r: 10,
                s: 100,
                lr: 1e-3,
                warmup: 100,
                prior_mu: 1e-5,
                prior_sigma: 1e-5,
                likelihood_sd: 1.0,
                rate_hz: 200.0,
                val_every: 0,
                ..base
            },
            System::PredPrey4 => TrainConfig { iters: 5000, m: 16, batch: 256, rate_hz: 10.0, ..base },
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let counts = [("m", self.m), ("r", self.r), ("s", self.s), ("batch", self.batch), ("val_paths", self.val_paths), ("node_window", self.node_window), ("node_batch", self.node_batch)];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{k} must be positive"));
        }
        if self.iters == 0 {
            return Err("iters must be positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err("lr_decay must lie in (0, 1]".into());
        }
        let positive = [
            ("lr", self.lr),
            ("kernel_ell", self.kernel_ell),
            ("kernel_sigma_f", self.kernel_sigma_f),
            ("kernel_sigma_n", self.kernel_sigma_n),
            ("prior_sigma", self.prior_sigma),
            ("post_sigma", self.post_sigma),
            ("likelihood_sd", self.likelihood_sd),
            ("rate_hz", self.rate_hz),
            ("horizon", self.horizon),
            ("val_dt", self.val_dt),
            ("rtol", self.rtol),
            ("atol", self.atol),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(format!("{k} must be positive and finite"));
        }
        if self.val_horizon < 0.0 {
            return Err("val_horizon must be non-negative".into());
        }
        if self.system == System::Generic && self.data.is_none() {
            return Err("system 'generic' needs a data path".into());
        }
        Ok(())
    }

    /// Parses configuration text; `origin` is used in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| CliError::Config { path: origin.to_path_buf(), line, msg };
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(idx + 1, format!("expected 'key = value', found '{line}'")))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if entries.iter().any(|(_, seen, _)| *seen == k) {
                return Err(err(idx + 1, format!("key '{k}' given twice")));
            }
            entries.push((idx + 1, k, v));
        }
        let system = match entries.iter().find(|(_, k, _)| k == "system") {
            Some((line, _, v)) => v.parse().map_err(|e| err(*line, e))?,
            None => System::LotkaVolterra,
        };
        let mut cfg = TrainConfig::preset(system);
        for (line, k, v) in &entries {
            cfg.set(k, v).map_err(|e| err(*line, e))?;
        }
        cfg.validate().map_err(|e| err(0, e))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text, path)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("{key}: cannot parse '{v}': {e}"))
        }
        match key {
            "system" => self.system = p(key, value)?,
            "method" => self.method = p(key, value)?,
            "data" => self.data = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "data_seed" => self.data_seed = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "iters" => self.iters = p(key, value)?,
            "m" => self.m = p(key, value)?,
            "k" => self.k = p(key, value)?,
            "r" => self.r = p(key, value)?,
            "s" => self.s = p(key, value)?,
            "batch" => self.batch = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "lr_decay" => self.lr_decay = p(key, value)?,
            "warmup" => self.warmup = p(key, value)?,
            "warmup_residual" => self.warmup_residual = p(key, value)?,
            "stratified" => self.stratified = p(key, value)?,
            "scaling" => self.scaling = p(key, value)?,
            "interp" => self.interp = p(key, value)?,
            "kernel_ell" => self.kernel_ell = p(key, value)?,
            "kernel_sigma_f" => self.kernel_sigma_f = p(key, value)?,
            "kernel_sigma_n" => self.kernel_sigma_n = p(key, value)?,
            "prior_mu" => self.prior_mu = p(key, value)?,
            "prior_sigma" => self.prior_sigma = p(key, value)?,
            "post_mu" => self.post_mu = p(key, value)?,
            "post_sigma" => self.post_sigma = p(key, value)?,
            "likelihood_sd" => self.likelihood_sd = p(key, value)?,
            "rate_hz" => self.rate_hz = p(key, value)?,
            "horizon" => self.horizon = p(key, value)?,
            "t_train" => self.t_train = if value.is_empty() { None } else { Some(p(key, value)?) },
            "val_every" => self.val_every = p(key, value)?,
            "val_paths" => self.val_paths = p(key, value)?,
            "val_dt" => self.val_dt = p(key, value)?,
            "val_horizon" => self.val_horizon = p(key, value)?,
            "rtol" => self.rtol = p(key, value)?,
            "atol" => self.atol = p(key, value)?,
            "node_window" => self.node_window = p(key, value)?,
            "node_batch" => self.node_batch = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "precision" => {
                if value != "f64" {
                    return Err(format!("precision '{value}' is not supported; only f64"));
                }
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Canonical text with every key, in a fixed order. Parsing it back gives
    /// the same configuration.
    pub fn to_text(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let scaling = match self.scaling {
            Scaling::Windows => "windows",
            Scaling::Observations => "observations",
        };
        let interp = match self.interp {
            InterpForm::Regularized => "regularized",
            InterpForm::Literal => "literal",
        };
        let lines = [
            format!("system = {}", self.system),
            format!("method = {}", self.method),
            format!("data = {}", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            format!("data_seed = {}", self.data_seed),
            format!("seed = {}", self.seed),
            format!("iters = {}", self.iters),
            format!("m = {}", self.m),
            format!("k = {}", self.k),
            format!("r = {}", self.r),
            format!("s = {}", self.s),
            format!("batch = {}", self.batch),
            format!("lr = {:?}", self.lr),
            format!("lr_decay = {:?}", self.lr_decay),
            format!("warmup = {}", self.warmup),
            format!("warmup_residual = {}", self.warmup_residual),
            format!("stratified = {}", self.stratified),
            format!("scaling = {scaling}"),
            format!("interp = {interp}"),
            format!("kernel_ell = {:?}", self.kernel_ell),
            format!("kernel_sigma_f = {:?}", self.kernel_sigma_f),
            format!("kernel_sigma_n = {:?}", self.kernel_sigma_n),
            format!("prior_mu = {:?}", self.prior_mu),
            format!("prior_sigma = {:?}", self.prior_sigma),
            format!("post_mu = {:?}", self.post_mu),
            format!("post_sigma = {:?}", self.post_sigma),
            format!("likelihood_sd = {:?}", self.likelihood_sd),
            format!("rate_hz = {:?}", self.rate_hz),
            format!("horizon = {:?}", self.horizon),
            format!("t_train = {}", opt(&self.t_train)),
            format!("val_every = {}", self.val_every),
            format!("val_paths = {}", self.val_paths),
            format!("val_dt = {:?}", self.val_dt),
            format!("val_horizon = {:?}", self.val_horizon),
            format!("rtol = {:?}", self.rtol),
            format!("atol = {:?}", self.atol),
            format!("node_window = {}", self.node_window),
            format!("node_batch = {}", self.node_batch),
            format!("checkpoint_every = {}", self.checkpoint_every),
            "precision = f64".to_string(),
        ];
        lines.join("\n") + "\n"
    }
}
