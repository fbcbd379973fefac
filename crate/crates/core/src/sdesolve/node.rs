//! Neural-ODE baseline trained by differentiating through the solver.
//!
//! Each Dormand–Prince stage is recorded on the tape, so the reverse sweep
//! runs through the solver internals. Step sizes come from the controller on
//! plain values and are treated as constants.

use crate::diffengine::{Array, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::models::DriftModel;

use super::rk45::{dense_weights, error_norm, initial_step, step_factor, Rk45Config, A, C, E};
use super::NfeCounter;

/// One training window: observation times and rows of `obs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub times: Vec<f64>,
    pub obs: Array,
}

fn combine(tape: &mut Tape, base: Var, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc = base;
    for &(c, v) in terms {
        if c != 0.0 {
            let s = tape.scale(v, c)?;
            acc = tape.add(acc, s)?;
        }
    }
    Ok(acc)
}

/// Solves `y' = f(y)` for every row of `y0` from `t0` through the increasing
/// times `t_eval`, returning one `n x d` node per requested time.
pub fn solve_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    drift: &DriftModel,
    y0: Var,
    t0: f64,
    t_eval: &[f64],
    cfg: &Rk45Config,
    counter: &mut NfeCounter,
) -> Result<Vec<Var>> {
    if t_eval.windows(2).any(|w| w[1] < w[0]) || t_eval.first().is_some_and(|&t| t < t0) {
        return Err(Error::invalid("solve_on_tape: t_eval must be increasing and start after t0"));
    }
    let t1 = match t_eval.last() {
        Some(&t) => t,
        None => return Ok(vec![]),
    };
    let n = tape.value(y0).rows();
    let f = |tape: &mut Tape, y: Var, t: f64, counter: &mut NfeCounter| -> Result<Var> {
        counter.tick();
        let tv = tape.constant(Array::filled(n, 1, t));
        drift.eval(tape, store, y, Some(tv))
    };
    let mut out = Vec::with_capacity(t_eval.len());
    let mut next = 0;
    let mut t = t0;
    let mut y = y0;
    let mut k0 = f(tape, y, t, counter)?;
    while next < t_eval.len() && t_eval[next] == t0 {
        out.push(y);
        next += 1;
    }
    if next == t_eval.len() {
        return Ok(out);
    }
    let mut h = cfg
        .h_init
        .unwrap_or_else(|| initial_step(tape.value(y).as_slice(), tape.value(k0).as_slice(), cfg, t1 - t0));
    let mut err_prev = 1e-4;
    let mut steps = 0;
    loop {
        if h < cfg.h_min {
            return Err(Error::StepTooSmall { t, h });
        }
        if steps >= cfg.max_steps {
            return Err(Error::StepBudget { t, max_steps: cfg.max_steps });
        }
        steps += 1;
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        let mut k = vec![k0];
        let mut y_new_val = y;
        for s in 1..7 {
            let terms: Vec<(f64, Var)> = (0..s).map(|q| (h * A[s][q], k[q])).collect();
            let ys = combine(tape, y, &terms)?;
            // The last stage is evaluated at the fifth-order solution.
            y_new_val = ys;
            k.push(f(tape, ys, t + C[s] * h, counter)?);
        }
        let yv = tape.value(y).as_slice();
        let ynv = tape.value(y_new_val).as_slice();
        let err: Vec<f64> = (0..yv.len())
            .map(|j| h * (0..7).map(|i| E[i] * tape.value(k[i]).as_slice()[j]).sum::<f64>())
            .collect();
        let en = error_norm(&err, yv, ynv, cfg);
        if !en.is_finite() {
            if h * 0.2 < cfg.h_min {
                return Err(Error::NonFiniteState { step: steps, t });
            }
            h *= 0.2;
            continue;
        }
        if en <= 1.0 {
            let t_new = if last { t1 } else { t + h };
            while next < t_eval.len() && t_eval[next] <= t_new {
                let q = dense_weights((t_eval[next] - t) / h);
                let terms: Vec<(f64, Var)> = (0..7).map(|i| (h * q[i], k[i])).collect();
                out.push(combine(tape, y, &terms)?);
                next += 1;
            }
            t = t_new;
            y = y_new_val;
            k0 = k[6];
            if last || next == t_eval.len() {
                break;
            }
            h *= step_factor(en, err_prev, false);
            err_prev = en.max(1e-4);
        } else {
            h *= step_factor(en, err_prev, true);
        }
    }
    Ok(out)
}

/// Mean squared error of the solutions started from each window's first
/// observation, over all later observations and dimensions. All windows must
/// share the same time offsets so they can be solved as one batch.
pub fn node_train_step(
    tape: &mut Tape,
    store: &ParamStore,
    drift: &DriftModel,
    windows: &[Window],
    cfg: &Rk45Config,
    counter: &mut NfeCounter,
) -> Result<Var> {
    let first = windows.first().ok_or_else(|| Error::invalid("node_train_step: empty batch"))?;
    let len = first.times.len();
    if len < 2 {
        return Err(Error::invalid("node_train_step: windows need at least two observations"));
    }
    let offsets: Vec<f64> = first.times.iter().map(|t| t - first.times[0]).collect();
    for w in windows {
        if w.times.len() != len || w.obs.rows() != len {
            return Err(Error::invalid("node_train_step: windows differ in length"));
        }
        if w.times.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::invalid("node_train_step: window times must be sorted"));
        }
        let same = w.times.iter().zip(&offsets).all(|(t, o)| ((t - w.times[0]) - o).abs() <= 1e-9 * o.abs().max(1.0));
        if !same {
            return Err(Error::invalid("node_train_step: windows must share time offsets"));
        }
    }
    let d = drift.dim;
    let b = windows.len();
    let y0 = Array::from_fn(b, d, |i, j| windows[i].obs[(0, j)]);
    let y0 = tape.constant(y0);
    let states = solve_on_tape(tape, store, drift, y0, 0.0, &offsets[1..], cfg, counter)?;
    let mut total: Option<Var> = None;
    for (s, state) in states.into_iter().enumerate() {
        let target = Array::from_fn(b, d, |i, j| windows[i].obs[(s + 1, j)]);
        let target = tape.constant(target);
        let diff = tape.sub(state, target)?;
        let sq = tape.square(diff)?;
        let sum = tape.sum(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, sum)?,
            None => sum,
        });
    }
    let total = total.expect("at least one later observation");
    tape.scale(total, 1.0 / (b * (len - 1) * d) as f64)
}
