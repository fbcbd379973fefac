//! Benchmark studies: validation accuracy per function evaluation on
//! Lotka–Volterra, gradient magnitudes on Lorenz as the horizon grows, and the
//! effect of the inner Monte Carlo sample count on a four-species system.

use std::fmt::Write as _;
use std::path::Path;

use latsde_core::data::{gen_lorenz, LorenzConfig};
use latsde_core::sdesolve::{adjoint_grad, LorenzField, NfeCounter, Rk45Config};

use crate::config::{Method, System, TrainConfig};
use crate::error::{CliError, Result};
use crate::evaluate::constant_mean_rmse;
use crate::metrics::{self, validation_curve};
use crate::model::{build_model, init_params};
use crate::train::{train, train_on, RunOutput};

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Validation RMSE and cumulative NFE averaged over seeds at each validation
/// iteration shared by all runs.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanCurve {
    pub label: String,
    pub points: Vec<(u64, f64, f64)>,
}

impl MeanCurve {
    /// Validation points present in every run, with NFE and RMSE averaged.
    /// Runs where a validation failed drop that point for the whole curve.
    pub fn from_runs(label: &str, runs: &[RunOutput]) -> Self {
        let curves: Vec<Vec<(u64, u64, f64)>> = runs.iter().map(|r| validation_curve(&r.rows)).collect();
        let mut points = Vec::new();
        if let Some(first) = curves.first() {
            for &(iter, _, _) in first {
                let hits: Vec<(u64, f64)> = curves.iter().filter_map(|c| c.iter().find(|p| p.0 == iter).map(|p| (p.1, p.2))).collect();
                if hits.len() == curves.len() {
                    let n = hits.len() as f64;
                    let nfe = hits.iter().map(|h| h.0 as f64).sum::<f64>() / n;
                    let rmse = hits.iter().map(|h| h.1).sum::<f64>() / n;
                    points.push((iter, nfe, rmse));
                }
            }
        }
        MeanCurve { label: label.to_string(), points }
    }

    /// Lowest mean RMSE and the NFE where it is first attained.
    pub fn best(&self) -> Option<(f64, f64)> {
        self.points.iter().fold(None, |acc: Option<(f64, f64)>, &(_, nfe, r)| match acc {
            Some((br, _)) if br <= r => acc,
            _ => Some((r, nfe)),
        })
    }

    /// NFE at the first validation point with mean RMSE at most `target`.
    pub fn nfe_to_reach(&self, target: f64) -> Option<f64> {
        self.points.iter().find(|p| p.2 <= target).map(|p| p.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LvBench {
    /// Training seeds. Every run fits the same dataset.
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub arcta_iters: u64,
    pub node_iters: u64,
    pub rtols: Vec<f64>,
    pub val_every: u64,
}

impl Default for LvBench {
    fn default() -> Self {
        LvBench { seeds: (0..10).collect(), data_seed: 0, arcta_iters: 20_000, node_iters: 4000, rtols: vec![1e-3, 1e-5, 1e-7], val_every: 100 }
    }
}

impl LvBench {
    pub fn quick() -> Self {
        LvBench { seeds: vec![0], data_seed: 0, arcta_iters: 300, node_iters: 100, rtols: vec![1e-3], val_every: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LvSummary {
    pub arcta: MeanCurve,
    pub node: Vec<(f64, MeanCurve)>,
    /// Lowest mean RMSE over all baseline tolerances, with its NFE and tolerance.
    pub node_best: Option<(f64, f64, f64)>,
    /// ARCTA's NFE when its mean RMSE first reaches `node_best`.
    pub arcta_nfe_at_match: Option<f64>,
}

impl LvSummary {
    /// Baseline NFE divided by ARCTA NFE at the matched accuracy.
    pub fn nfe_ratio(&self) -> Option<f64> {
        Some(self.node_best?.1 / self.arcta_nfe_at_match?)
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        if let Some((r, nfe)) = self.arcta.best() {
            writeln!(s, "arcta: best mean RMSE {r:.4e} at {nfe:.0} NFE").unwrap();
        }
        for (rtol, c) in &self.node {
            if let Some((r, nfe)) = c.best() {
                writeln!(s, "node rtol {rtol:e}: best mean RMSE {r:.4e} at {nfe:.0} NFE").unwrap();
            }
        }
        match (self.node_best, self.arcta_nfe_at_match) {
            (Some((r, nfe, rtol)), Some(a)) => write!(s, "matched RMSE {r:.4e}: node (rtol {rtol:e}) {nfe:.0} NFE, arcta {a:.0} NFE, ratio {:.2}", nfe / a).unwrap(),
            (Some((r, ..)), None) => write!(s, "arcta never reached the best baseline RMSE {r:.4e}").unwrap(),
            _ => write!(s, "no baseline validation points").unwrap(),
        }
        s
    }
}

/// Trains ARCTA and the solver baseline at each tolerance over every seed.
/// Each run's metrics go to `<out>/<method>_..._seed<k>/metrics.csv`; the
/// averaged curves go to `curves.csv` and the comparison to `summary.txt`.
pub fn lv_bench(opts: &LvBench, out: &Path) -> Result<LvSummary> {
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let base = TrainConfig { val_every: opts.val_every, ..TrainConfig::preset(System::LotkaVolterra) };
    let mut arcta_runs = Vec::new();
    for &seed in &opts.seeds {
        let cfg = TrainConfig { seed, data_seed: opts.data_seed, iters: opts.arcta_iters, ..base.clone() };
        arcta_runs.push(train(&cfg, Some(&out.join(format!("arcta_seed{seed}"))))?);
    }
    let arcta = MeanCurve::from_runs("arcta", &arcta_runs);
    let mut node = Vec::new();
    for &rtol in &opts.rtols {
        let mut runs = Vec::new();
        for &seed in &opts.seeds {
            let cfg = TrainConfig { seed, data_seed: opts.data_seed, iters: opts.node_iters, method: Method::Node, rtol, atol: rtol, ..base.clone() };
            runs.push(train(&cfg, Some(&out.join(format!("node_rtol{rtol:e}_seed{seed}"))))?);
        }
        node.push((rtol, MeanCurve::from_runs(&format!("node rtol {rtol:e}"), &runs)));
    }
    let node_best = node.iter().filter_map(|(rtol, c)| c.best().map(|(r, nfe)| (r, nfe, *rtol))).fold(None, |acc: Option<(f64, f64, f64)>, x| match acc {
        Some(a) if a.0 <= x.0 => Some(a),
        _ => Some(x),
    });
    let arcta_nfe_at_match = node_best.and_then(|(r, ..)| arcta.nfe_to_reach(r));
    let summary = LvSummary { arcta, node, node_best, arcta_nfe_at_match };

    let mut csv = String::from("method,rtol,iter,mean_cum_nfe,mean_val_rmse\n");
    for (p, rtol) in std::iter::once((&summary.arcta, None)).chain(summary.node.iter().map(|(r, c)| (c, Some(*r)))) {
        let method = if rtol.is_some() { "node" } else { "arcta" };
        for &(iter, nfe, rmse) in &p.points {
            writeln!(csv, "{method},{},{iter},{nfe:?},{rmse:?}", cell(rtol)).unwrap();
        }
    }
    write(&out.join("curves.csv"), &csv)?;
    write(&out.join("summary.txt"), &(summary.describe() + "\n"))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LorenzGrad {
    pub horizons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub iters: u64,
}

impl Default for LorenzGrad {
    fn default() -> Self {
        LorenzGrad { horizons: vec![1.0, 10.0, 50.0, 100.0], seeds: (0..5).collect(), iters: 2000 }
    }
}

impl LorenzGrad {
    pub fn quick() -> Self {
        LorenzGrad { horizons: vec![1.0, 10.0], seeds: vec![0], iters: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LorenzRecord {
    pub horizon: f64,
    pub seed: u64,
    /// Norm of the adjoint gradient at the initial guess; `None` when the
    /// adjoint solve failed.
    pub adjoint_norm: Option<f64>,
    pub adjoint_nfe: u64,
    /// Mean over iterations of the per-observation gradient norm.
    pub arcta_mean_norm: f64,
    /// Iterations whose gradient was non-finite (skipped by the optimizer
    /// and left out of both averages).
    pub arcta_nonfinite: usize,
    /// Norm of the per-observation gradient averaged over iterations.
    pub arcta_norm_of_mean: f64,
    pub theta_final: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LorenzSummary {
    pub records: Vec<LorenzRecord>,
}

impl LorenzSummary {
    fn mean_by_horizon(&self, f: impl Fn(&LorenzRecord) -> Option<f64>) -> Vec<(f64, Option<f64>)> {
        let mut hs: Vec<f64> = self.records.iter().map(|r| r.horizon).collect();
        hs.dedup();
        hs.into_iter()
            .map(|h| {
                let vals: Option<Vec<f64>> = self.records.iter().filter(|r| r.horizon == h).map(&f).collect();
                (h, vals.map(|v| v.iter().sum::<f64>() / v.len() as f64))
            })
            .collect()
    }

    /// Seed-averaged adjoint gradient norm per horizon (`None` if any solve failed).
    pub fn adjoint_by_horizon(&self) -> Vec<(f64, Option<f64>)> {
        self.mean_by_horizon(|r| r.adjoint_norm)
    }

    pub fn arcta_by_horizon(&self) -> Vec<(f64, Option<f64>)> {
        self.mean_by_horizon(|r| Some(r.arcta_mean_norm))
    }

    pub fn describe(&self) -> String {
        let mut s = String::from("horizon  adjoint_norm  arcta_mean_norm\n");
        for ((h, a), (_, b)) in self.adjoint_by_horizon().into_iter().zip(self.arcta_by_horizon()) {
            writeln!(s, "{h:>7}  {:>12}  {:>15}", a.map_or("failed".into(), |v| format!("{v:.3e}")), b.map_or(String::new(), |v| format!("{v:.3e}"))).unwrap();
        }
        s
    }
}

/// Adjoint gradient at the initial guess and ARCTA's per-iteration gradient
/// norms over training, for each horizon and seed. ARCTA gradients are taken
/// of the loss divided by the number of observations so both methods report
/// per-observation sensitivities.
pub fn lorenz_grad(opts: &LorenzGrad, out: &Path) -> Result<LorenzSummary> {
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let mut records = Vec::new();
    for &horizon in &opts.horizons {
        for &seed in &opts.seeds {
            let cfg = TrainConfig { seed, data_seed: seed, horizon, iters: opts.iters, ..TrainConfig::preset(System::Lorenz) };
            let data_cfg = LorenzConfig { t_end: horizon, ..LorenzConfig::default() };
            let data = gen_lorenz(&data_cfg, seed)?;
            let model = build_model(&cfg, 3)?;
            let theta0 = init_params(&cfg, &model)?.value("lz.theta")?.as_slice().to_vec();

            let field = LorenzField { params: [theta0[0], theta0[1], theta0[2]] };
            let mut counter = NfeCounter::default();
            let solver = Rk45Config::new(data_cfg.rtol, data_cfg.atol);
            let adjoint_norm = match adjoint_grad(&field, &data_cfg.x0, &data.train.times, &data.train.obs, &solver, &mut counter) {
                Ok(r) => Some(r.grad_params.iter().map(|g| g * g).sum::<f64>().sqrt()).filter(|v| v.is_finite()),
                Err(e) => {
                    log::warn!("adjoint solve failed at horizon {horizon}, seed {seed}: {e}");
                    None
                }
            };

            let n = data.train.len() as f64;
            let mut norms = Vec::with_capacity(opts.iters as usize);
            let mut sum = [0.0; 3];
            let mut nonfinite = 0;
            let mut hook = |_: u64, store: &latsde_core::diffengine::ParamStore| {
                if !store.grads_finite() {
                    nonfinite += 1;
                    return;
                }
                let g = store.grad("lz.theta").expect("Lorenz parameters present").as_slice();
                norms.push(g.iter().map(|x| (x / n).powi(2)).sum::<f64>().sqrt());
                for (s, x) in sum.iter_mut().zip(g) {
                    *s += x / n;
                }
            };
            let dir = out.join(format!("arcta_T{horizon}_seed{seed}"));
            let run = train_on(&cfg, &data.train, None, Some(&dir), &mut hook)?;
            let k = norms.len() as f64;
            let theta = run.store.value("lz.theta")?.as_slice();
            records.push(LorenzRecord {
                horizon,
                seed,
                adjoint_norm,
                adjoint_nfe: counter.count(),
                arcta_mean_norm: norms.iter().sum::<f64>() / k,
                arcta_nonfinite: nonfinite,
                arcta_norm_of_mean: sum.iter().map(|s| (s / k).powi(2)).sum::<f64>().sqrt(),
                theta_final: [theta[0], theta[1], theta[2]],
            });
        }
    }
    let mut csv = String::from("horizon,seed,adjoint_norm,adjoint_nfe,arcta_mean_norm,arcta_norm_of_mean,arcta_nonfinite,sigma,beta,rho\n");
    for r in &records {
        let [a, b, c] = r.theta_final;
        writeln!(csv, "{:?},{},{},{},{:?},{:?},{},{a:?},{b:?},{c:?}", r.horizon, r.seed, cell(r.adjoint_norm), r.adjoint_nfe, r.arcta_mean_norm, r.arcta_norm_of_mean, r.arcta_nonfinite).unwrap();
    }
    write(&out.join("gradients.csv"), &csv)?;
    let summary = LorenzSummary { records };
    write(&out.join("summary.txt"), &summary.describe())?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct McStudy {
    pub s_values: Vec<usize>,
    pub seed: u64,
    pub iters: u64,
    pub m: usize,
    pub batch: usize,
    pub val_every: u64,
    /// Seconds of validation data after the end of training.
    pub val_horizon: f64,
}

impl Default for McStudy {
    fn default() -> Self {
        McStudy { s_values: vec![10, 50, 100], seed: 0, iters: 5000, m: 16, batch: 256, val_every: 100, val_horizon: 0.0 }
    }
}

impl McStudy {
    pub fn quick() -> Self {
        McStudy { iters: 200, batch: 8, val_every: 50, val_horizon: 10.0, ..McStudy::default() }
    }

    /// Reduced budget used by the acceptance suite.
    pub fn acceptance() -> Self {
        McStudy { iters: 1500, batch: 32, ..McStudy::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McRun {
    pub s: usize,
    /// Drift evaluations per iteration expected from `R * S * batch`.
    pub nfe_per_iter: u64,
    /// Whether every row's cumulative NFE equals `(iter + 1) * nfe_per_iter`.
    pub nfe_exact: bool,
    pub final_rmse: f64,
    pub best_rmse: f64,
    pub curve: Vec<(u64, u64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McSummary {
    pub runs: Vec<McRun>,
    /// RMSE of predicting the validation mean everywhere.
    pub constant_rmse: f64,
}

impl McSummary {
    /// Twice the lowest final RMSE over all runs.
    pub fn threshold(&self) -> f64 {
        2.0 * self.runs.iter().map(|r| r.final_rmse).fold(f64::INFINITY, f64::min)
    }

    pub fn all_reach_threshold(&self) -> bool {
        let t = self.threshold();
        self.runs.iter().all(|r| r.best_rmse <= t)
    }

    pub fn nfe_linear_in_s(&self) -> bool {
        let Some(first) = self.runs.first() else { return false };
        self.runs.iter().all(|r| r.nfe_exact && r.nfe_per_iter * first.s as u64 == first.nfe_per_iter * r.s as u64)
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        for r in &self.runs {
            writeln!(s, "S={:>4}: {} NFE/iter (exact: {}), final RMSE {:.4e}, best {:.4e}", r.s, r.nfe_per_iter, r.nfe_exact, r.final_rmse, r.best_rmse).unwrap();
        }
        write!(s, "constant-mean RMSE {:.4e}; threshold {:.4e}; all reach it: {}; NFE linear in S: {}", self.constant_rmse, self.threshold(), self.all_reach_threshold(), self.nfe_linear_in_s()).unwrap();
        s
    }
}

/// Trains on the four-species data once per inner sample count `S`.
pub fn mc_study(opts: &McStudy, out: &Path) -> Result<McSummary> {
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let mut runs = Vec::new();
    let mut constant_rmse = f64::NAN;
    for &s in &opts.s_values {
        let cfg = TrainConfig {
            s,
            seed: opts.seed,
            data_seed: opts.seed,
            iters: opts.iters,
            m: opts.m,
            batch: opts.batch,
            val_every: opts.val_every,
            val_horizon: opts.val_horizon,
            ..TrainConfig::preset(System::PredPrey4)
        };
        let run = train(&cfg, Some(&out.join(format!("arcta_S{s}"))))?;
        let (train_ds, val_ds) = crate::model::load_data(&cfg)?;
        let n_train = train_ds.len();
        if let Some(v) = &val_ds {
            constant_rmse = constant_mean_rmse(v.truth.as_ref().unwrap_or(&v.obs));
        }
        let n_parts = n_train.div_ceil(cfg.m);
        let nfe_per_iter = (cfg.r * cfg.s * cfg.batch.min(n_parts)) as u64;
        let nfe_exact = run.rows.iter().all(|row| row.cum_nfe == (row.iter + 1) * nfe_per_iter);
        let curve = validation_curve(&run.rows);
        let final_rmse = run.final_val_rmse().ok_or_else(|| CliError::usage("mc-study run has no validation points"))?;
        let best_rmse = curve.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
        runs.push(McRun { s, nfe_per_iter, nfe_exact, final_rmse, best_rmse, curve });
    }
    let mut csv = String::from("s,iter,cum_nfe,val_rmse\n");
    for r in &runs {
        for &(iter, nfe, rmse) in &r.curve {
            writeln!(csv, "{},{iter},{nfe},{rmse:?}", r.s).unwrap();
        }
    }
    write(&out.join("curves.csv"), &csv)?;
    let summary = McSummary { runs, constant_rmse };
    write(&out.join("summary.txt"), &(summary.describe() + "\n"))?;
    Ok(summary)
}

/// Metrics CSV text of a finished run (used by determinism checks).
pub fn metrics_text(run: &RunOutput) -> String {
    metrics::to_csv(&run.rows)
}
