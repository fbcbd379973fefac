//! The training objective.
//!
//! Per window `j` the estimate is
//!
//! ```text
//! LL_j  = (1/R) Σ_k Σ_i log p(x_i | m(t_i) + sqrt(S(t_i)) ε_k)
//! RES_j = Δt_j / (2 R S) Σ_k Σ_l ‖r(z_kl, t_kl)‖²_C
//! ```
//!
//! with one `ε_k` shared by the `S` time samples of row `k`. The diffusion
//! `C⁻¹ = diag(θ)` has a log-normal posterior whose KL to a log-normal prior
//! is added in closed form.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffengine::{Array, ParamStore, Tape, Var};
use crate::encoder::{Encoder, Partition};
use crate::error::{Error, Result};
use crate::mgp::{reparam, residual};
use crate::models::{DriftModel, GaussianLikelihood};
use crate::rng::{KeyedRng, Purpose};

/// Log-normal posterior over the positive diffusion entries, with a
/// log-normal prior `LN(prior_mu, prior_sigma²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogNormalPosterior {
    pub prefix: String,
    pub prior_mu: Vec<f64>,
    pub prior_sigma: Vec<f64>,
}

impl LogNormalPosterior {
    pub fn new(prefix: impl Into<String>, prior_mu: Vec<f64>, prior_sigma: Vec<f64>) -> Result<Self> {
        if prior_mu.len() != prior_sigma.len() || prior_mu.is_empty() {
            return Err(Error::invalid("log-normal prior: mu and sigma must have equal non-zero length"));
        }
        if prior_sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("log-normal prior: sigma must be positive"));
        }
        Ok(LogNormalPosterior { prefix: prefix.into(), prior_mu, prior_sigma })
    }

    pub fn dim(&self) -> usize {
        self.prior_mu.len()
    }

    pub fn mu_name(&self) -> String {
        format!("{}.mu", self.prefix)
    }

    pub fn log_sigma_name(&self) -> String {
        format!("{}.log_sigma", self.prefix)
    }

    /// Sets the posterior to `LN(mu, sigma²)` in every coordinate.
    pub fn init(&self, store: &mut ParamStore, mu: f64, sigma: f64) {
        let d = self.dim();
        store.insert(&self.mu_name(), Array::filled(1, d, mu));
        store.insert(&self.log_sigma_name(), Array::filled(1, d, sigma.ln()));
    }

    /// `exp(mu + sigma ⊙ nu)` as a `1 x d` row.
    pub fn sample_theta(&self, tape: &mut Tape, store: &ParamStore, nu: &[f64]) -> Result<Var> {
        if nu.len() != self.dim() {
            return Err(Error::invalid(format!("sample_theta: {} normals for {} entries", nu.len(), self.dim())));
        }
        let mu = tape.param(store, &self.mu_name())?;
        let ls = tape.param(store, &self.log_sigma_name())?;
        let sigma = tape.exp(ls)?;
        let nu = tape.constant(Array::row(nu));
        let shift = tape.mul(sigma, nu)?;
        let log_theta = tape.add(mu, shift)?;
        tape.exp(log_theta)
    }

    /// Closed-form KL to the prior on the tape.
    pub fn kl(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let d = self.dim();
        let mu = tape.param(store, &self.mu_name())?;
        let ls = tape.param(store, &self.log_sigma_name())?;
        let var = tape.scale(ls, 2.0)?;
        let var = tape.exp(var)?;
        let prior_mu = tape.constant(Array::row(&self.prior_mu).scale(-1.0));
        let diff = tape.add(mu, prior_mu)?;
        let diff2 = tape.square(diff)?;
        let num = tape.add(var, diff2)?;
        let inv = tape.constant(Array::from_fn(1, d, |_, j| 0.5 / self.prior_sigma[j].powi(2)));
        let quad = tape.mul(num, inv)?;
        let quad = tape.sum(quad)?;
        let sum_ls = tape.sum(ls)?;
        let body = tape.sub(quad, sum_ls)?;
        let c: f64 = self.prior_sigma.iter().map(|s| s.ln()).sum::<f64>() - 0.5 * d as f64;
        tape.offset(body, c)
    }
}

/// Closed-form `KL(LN(mu, sigma²) ‖ LN(prior_mu, prior_sigma²))`, summed over entries.
pub fn kl_lognormal(mu: &[f64], sigma: &[f64], prior_mu: &[f64], prior_sigma: &[f64]) -> f64 {
    let d = mu.len() as f64;
    let logs: f64 = (0..mu.len()).map(|i| prior_sigma[i].ln() - sigma[i].ln()).sum();
    let quad: f64 = (0..mu.len()).map(|i| (sigma[i].powi(2) + (mu[i] - prior_mu[i]).powi(2)) / prior_sigma[i].powi(2)).sum();
    logs - 0.5 * (d - quad)
}

/// Monte Carlo sizes and the warmup length of the KL weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct McConfig {
    pub r: usize,
    pub s: usize,
    pub stratified: bool,
    pub warmup: u64,
}

impl McConfig {
    pub fn new(r: usize, s: usize) -> Self {
        McConfig { r, s, stratified: true, warmup: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.s == 0 {
            return Err(Error::invalid("R and S must be at least 1"));
        }
        Ok(())
    }

    /// `min(iter / W, 1)`, and 1 when there is no warmup.
    pub fn kl_weight(&self, iter: u64) -> f64 {
        if self.warmup == 0 {
            1.0
        } else {
            (iter as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// Factor multiplying the summed per-window estimates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scaling {
    /// `(number of windows) / |batch|`
    #[default]
    Windows,
    /// `N / |batch|` with `N` the number of observations.
    Observations,
}

impl std::str::FromStr for Scaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "windows" => Ok(Scaling::Windows),
            "observations" => Ok(Scaling::Observations),
            other => Err(Error::invalid(format!("unknown scaling '{other}'"))),
        }
    }
}

/// Standard normals and time samples for one window estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct McDraws {
    /// `R x d`
    pub eps: Array,
    /// `R x S`
    pub times: Array,
}

impl McDraws {
    /// Draws `ε` from `eps_rng` and the time samples from `time_rng`.
    pub fn sample<R1: Rng, R2: Rng>(eps_rng: &mut R1, time_rng: &mut R2, part: &Partition, mc: &McConfig, d: usize) -> Self {
        McDraws { eps: Self::normals(eps_rng, mc.r, d), times: Self::time_samples(time_rng, part, mc) }
    }

    pub fn normals<R: Rng>(rng: &mut R, r: usize, d: usize) -> Array {
        Array::from_fn(r, d, |_, _| StandardNormal.sample(&mut *rng))
    }

    /// `R x S` times on the window's interval; with stratification row `k`
    /// has exactly one sample in each of the `S` equal sub-intervals.
    pub fn time_samples<R: Rng>(rng: &mut R, part: &Partition, mc: &McConfig) -> Array {
        let (a, span) = (part.t_start, part.span());
        Array::from_fn(mc.r, mc.s, |_, l| {
            let u: f64 = rng.random();
            if mc.stratified {
                a + span * (l as f64 + u) / mc.s as f64
            } else {
                a + span * u
            }
        })
    }
}

/// Everything the objective needs besides parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSdeModel {
    pub encoder: Encoder,
    pub drift: DriftModel,
    pub likelihood: GaussianLikelihood,
    pub diffusion: LogNormalPosterior,
}

impl LatentSdeModel {
    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.latent_dim();
        if self.drift.dim != d || self.diffusion.dim() != d {
            return Err(Error::invalid(format!(
                "latent dimensions disagree: encoder {d}, drift {}, diffusion {}",
                self.drift.dim,
                self.diffusion.dim()
            )));
        }
        Ok(())
    }
}

/// Unscaled per-window terms on a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowTerms {
    /// Likelihood term (to be maximized).
    pub ll: Var,
    /// Residual term `Δt/(2RS) Σ ‖r‖²`, non-negative (to be minimized).
    pub res: Var,
    /// Drift evaluations spent (exactly `R * S`).
    pub nfe: u64,
}

/// Builds the per-window estimate for given draws and diffusion `theta` (`1 x d`).
pub fn elbo_partition_estimate_with(tape: &mut Tape, store: &ParamStore, model: &LatentSdeModel, part: &Partition, theta: Var, draws: &McDraws) -> Result<WindowTerms> {
    if part.is_empty() {
        return Err(Error::invalid("cannot estimate the objective on an empty window"));
    }
    let d = model.latent_dim();
    let (r, s) = draws.times.shape();
    if draws.eps.shape() != (r, d) || r == 0 || s == 0 {
        return Err(Error::invalid("draws do not match R, S and the latent dimension"));
    }
    let mut enc = model.encoder.encode_nodes(tape, store, part)?;

    let m_obs = part.len();
    let mo = model.encoder.interpolate(tape, store, &mut enc, &part.times)?;
    let x = tape.constant(part.obs.clone());
    let mut ll_acc: Option<Var> = None;
    for k in 0..r {
        let eps = tape.constant(Array::from_fn(m_obs, d, |_, j| draws.eps[(k, j)]));
        let z = reparam(tape, &mo, eps)?;
        let lk = model.likelihood.log_lik(tape, store, x, z)?;
        ll_acc = Some(match ll_acc {
            None => lk,
            Some(a) => tape.add(a, lk)?,
        });
    }
    let ll = tape.scale(ll_acc.unwrap(), 1.0 / r as f64)?;

    let tq: Vec<f64> = draws.times.as_slice().to_vec();
    let mq = model.encoder.interpolate(tape, store, &mut enc, &tq)?;
    let eps = tape.constant(Array::from_fn(r * s, d, |row, j| draws.eps[(row / s, j)]));
    let z = reparam(tape, &mq, eps)?;
    let tcol = tape.constant(Array::col(&tq));
    let f = model.drift.eval(tape, store, z, Some(tcol))?;
    let (_, w) = residual(tape, f, &mq, z, theta)?;
    let total = tape.sum(w)?;
    let res = tape.scale(total, part.span() / (2.0 * (r * s) as f64))?;
    Ok(WindowTerms { ll, res, nfe: (r * s) as u64 })
}

/// Draws from `rng` (first all `ε`, then all times) and builds the estimate.
pub fn elbo_partition_estimate<R: Rng>(tape: &mut Tape, store: &ParamStore, model: &LatentSdeModel, part: &Partition, theta: Var, mc: &McConfig, rng: &mut R) -> Result<WindowTerms> {
    mc.validate()?;
    let eps = McDraws::normals(rng, mc.r, model.latent_dim());
    let times = McDraws::time_samples(rng, part, mc);
    let draws = McDraws { eps, times };
    elbo_partition_estimate_with(tape, store, model, part, theta, &draws)
}

/// Options of the full objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub mc: McConfig,
    pub scaling: Scaling,
    /// Apply the warmup weight to the residual term as well as to the KL.
    pub warmup_residual: bool,
    /// Share one θ draw across the batch (otherwise θ is fixed at its median).
    pub sample_theta: bool,
}

impl ObjectiveConfig {
    pub fn new(mc: McConfig) -> Self {
        ObjectiveConfig { mc, scaling: Scaling::Windows, warmup_residual: true, sample_theta: true }
    }
}

/// Values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Unweighted ELBO estimate `scale Σ (LL - RES) - KL`.
    pub elbo: f64,
    pub ll_term: f64,
    pub res_term: f64,
    pub kl_theta: f64,
    pub kl_weight: f64,
    pub nfe: u64,
}

/// Records the negative weighted objective for `batch` on `tape`.
pub fn build_loss(
    tape: &mut Tape,
    store: &ParamStore,
    model: &LatentSdeModel,
    batch: &[&Partition],
    n_obs: usize,
    n_windows: usize,
    iter: u64,
    cfg: &ObjectiveConfig,
    rng: &KeyedRng,
) -> Result<(Var, LossReport)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    cfg.mc.validate()?;
    model.validate()?;
    let d = model.latent_dim();
    let nu: Vec<f64> = if cfg.sample_theta {
        let mut g = rng.stream(Purpose::Theta, iter, 0);
        (0..d).map(|_| StandardNormal.sample(&mut g)).collect()
    } else {
        vec![0.0; d]
    };
    let theta = model.diffusion.sample_theta(tape, store, &nu)?;
    let mut ll_sum: Option<Var> = None;
    let mut res_sum: Option<Var> = None;
    let mut nfe = 0;
    for (pos, part) in batch.iter().enumerate() {
        let mut eps_rng = rng.stream(Purpose::Epsilon, iter, pos as u64);
        let mut time_rng = rng.stream(Purpose::TimeSample, iter, pos as u64);
        let draws = McDraws::sample(&mut eps_rng, &mut time_rng, part, &cfg.mc, d);
        let terms = elbo_partition_estimate_with(tape, store, model, part, theta, &draws)?;
        nfe += terms.nfe;
        ll_sum = Some(match ll_sum {
            None => terms.ll,
            Some(a) => tape.add(a, terms.ll)?,
        });
        res_sum = Some(match res_sum {
            None => terms.res,
            Some(a) => tape.add(a, terms.res)?,
        });
    }
    let scale = match cfg.scaling {
        Scaling::Windows => n_windows as f64,
        Scaling::Observations => n_obs as f64,
    } / batch.len() as f64;
    let beta = cfg.mc.kl_weight(iter);
    let beta_res = if cfg.warmup_residual { beta } else { 1.0 };
    let ll = tape.scale(ll_sum.unwrap(), scale)?;
    let res = tape.scale(res_sum.unwrap(), scale)?;
    let kl = model.diffusion.kl(tape, store)?;
    let res_w = tape.scale(res, beta_res)?;
    let kl_w = tape.scale(kl, beta)?;
    let penalty = tape.add(res_w, kl_w)?;
    let loss = tape.sub(penalty, ll)?;
    let (llv, resv, klv) = (tape.value(ll).item(), tape.value(res).item(), tape.value(kl).item());
    let report = LossReport {
        loss: tape.value(loss).item(),
        elbo: llv - resv - klv,
        ll_term: llv,
        res_term: resv,
        kl_theta: klv,
        kl_weight: beta,
        nfe,
    };
    Ok((loss, report))
}

/// Evaluates the loss and adds its gradient into `store`.
pub fn loss_and_grad(
    store: &mut ParamStore,
    model: &LatentSdeModel,
    batch: &[&Partition],
    n_obs: usize,
    n_windows: usize,
    iter: u64,
    cfg: &ObjectiveConfig,
    rng: &KeyedRng,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let (loss, report) = build_loss(&mut tape, store, model, batch, n_obs, n_windows, iter, cfg, rng)?;
    tape.backward(loss, 1.0, store)?;
    Ok(report)
}
