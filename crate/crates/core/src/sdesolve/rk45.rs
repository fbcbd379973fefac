//! Dormand–Prince 5(4) with FSAL, a PI step-size controller and quartic
//! dense output.

use crate::error::{Error, Result};

use super::NfeCounter;

pub const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

pub const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];

/// Fifth-order weights (identical to the last row of `A`).
pub const B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];

/// Difference between the fifth- and fourth-order weights.
pub const E: [f64; 7] = [
    -71.0 / 57600.0,
    0.0,
    71.0 / 16695.0,
    -71.0 / 1920.0,
    17253.0 / 339200.0,
    -22.0 / 525.0,
    1.0 / 40.0,
];

/// Dense-output coefficients: `y(t + s h) = y + h * sum_i K_i * (P_i . [s, s^2, s^3, s^4])`.
pub const P: [[f64; 4]; 7] = [
    [1.0, -8048581381.0 / 2820520608.0, 8663915743.0 / 2820520608.0, -12715105075.0 / 11282082432.0],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200.0 / 32700410799.0, -68118460800.0 / 10900136933.0, 87487479700.0 / 32700410799.0],
    [0.0, -1754552775.0 / 470086768.0, 14199869525.0 / 1410260304.0, -10690763975.0 / 1880347072.0],
    [0.0, 127303824393.0 / 49829197408.0, -318862633887.0 / 49829197408.0, 701980252875.0 / 199316789632.0],
    [0.0, -282668133.0 / 205662961.0, 2019193451.0 / 616988883.0, -1453857185.0 / 822651844.0],
    [0.0, 40617522.0 / 29380423.0, -110615467.0 / 29380423.0, 69997945.0 / 29380423.0],
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;

/// Dense-output weights at fraction `s` of a step.
pub fn dense_weights(s: f64) -> [f64; 7] {
    let pow = [s, s * s, s * s * s, s * s * s * s];
    let mut q = [0.0; 7];
    for i in 0..7 {
        q[i] = (0..4).map(|k| P[i][k] * pow[k]).sum();
    }
    q
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rk45Config {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen from the local scale of `y` and `f` when `None`.
    pub h_init: Option<f64>,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Rk45Config {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Rk45Config { rtol, atol, h_init: None, h_min: 1e-12, max_steps: 1_000_000 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.h_min > 0.0) {
            return Err(Error::invalid("rk45: tolerances and h_min must be positive"));
        }
        Ok(())
    }
}

/// Error norm used by the controller (RMS of scaled local error).
pub fn error_norm(err: &[f64], y: &[f64], y_new: &[f64], cfg: &Rk45Config) -> f64 {
    let n = err.len().max(1) as f64;
    let s: f64 = err
        .iter()
        .zip(y.iter().zip(y_new))
        .map(|(e, (a, b))| {
            let sc = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

/// PI step-size update after a step with error norm `err` (previous accepted
/// error `err_prev`). Returns the multiplicative factor.
pub fn step_factor(err: f64, err_prev: f64, rejected: bool) -> f64 {
    let f = if err == 0.0 {
        MAX_FACTOR
    } else {
        SAFETY * err.powf(-ALPHA) * err_prev.powf(BETA)
    };
    let f = f.clamp(MIN_FACTOR, MAX_FACTOR);
    if rejected {
        f.min(1.0)
    } else {
        f
    }
}

/// Initial step guess from `|y|` and `|f(y)|`, without extra evaluations.
pub fn initial_step(y: &[f64], f0: &[f64], cfg: &Rk45Config, span: f64) -> f64 {
    let scale: Vec<f64> = y.iter().map(|v| cfg.atol + cfg.rtol * v.abs()).collect();
    let rms = |v: &[f64]| (v.iter().zip(&scale).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt();
    let (d0, d1) = (rms(y), rms(f0));
    let h = if d1 < 1e-5 {
        // The field is negligible at the tolerance scale; let the controller shrink it.
        span.abs()
    } else if d0 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h.min(span.abs()).max(cfg.h_min)
}

#[derive(Clone, Debug, Default)]
pub struct Rk45Solution {
    /// Requested output times and the states there.
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub t_final: f64,
    pub y_final: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
}

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction), reporting
/// the state at each time in `t_eval` (monotone in the direction of
/// integration, inside the span).
pub fn rk45_solve<F>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    t_eval: &[f64],
    cfg: &Rk45Config,
    counter: &mut NfeCounter,
) -> Result<Rk45Solution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    cfg.validate()?;
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    for w in t_eval.windows(2) {
        if (w[1] - w[0]) * dir < 0.0 {
            return Err(Error::invalid("rk45: t_eval must be monotone along the integration direction"));
        }
    }
    if t_eval.iter().any(|&t| (t - t0) * dir < -1e-12 * t0.abs().max(1.0) || (t - t1) * dir > 1e-12 * t1.abs().max(1.0)) {
        return Err(Error::invalid("rk45: t_eval outside the integration span"));
    }
    let n = y0.len();
    let mut sol = Rk45Solution { t: t_eval.to_vec(), ..Default::default() };
    let mut next_eval = 0;
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    f(t, &y, &mut k[0])?;
    counter.tick();
    while next_eval < t_eval.len() && t_eval[next_eval] == t0 {
        sol.y.push(y.clone());
        next_eval += 1;
    }
    if t0 == t1 {
        sol.t_final = t;
        sol.y_final = y;
        return Ok(sol);
    }
    let mut h = cfg.h_init.unwrap_or_else(|| initial_step(&y, &k[0], cfg, t1 - t0)).abs();
    let mut err_prev = 1e-4;
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut steps = 0usize;
    loop {
        if h < cfg.h_min {
            return Err(Error::StepTooSmall { t, h });
        }
        if steps >= cfg.max_steps {
            return Err(Error::StepBudget { t, max_steps: cfg.max_steps });
        }
        steps += 1;
        let mut last = false;
        if (t + dir * h - t1) * dir >= 0.0 {
            h = (t1 - t).abs();
            last = true;
        }
        let hs = dir * h;
        for s in 1..7 {
            for j in 0..n {
                let mut acc = y[j];
                for (q, kq) in k.iter().enumerate().take(s) {
                    acc += hs * A[s][q] * kq[j];
                }
                stage[j] = acc;
            }
            f(t + C[s] * hs, &stage, &mut k[s])?;
            counter.tick();
            if s == 6 {
                y_new.copy_from_slice(&stage);
            }
        }
        for j in 0..n {
            err[j] = hs * (0..7).map(|i| E[i] * k[i][j]).sum::<f64>();
        }
        let en = error_norm(&err, &y, &y_new, cfg);
        if !en.is_finite() || !y_new.iter().all(|v| v.is_finite()) {
            if h * 0.2 < cfg.h_min {
                return Err(Error::NonFiniteState { step: steps, t });
            }
            h *= 0.2;
            sol.rejected += 1;
            continue;
        }
        if en <= 1.0 {
            let t_new = if last { t1 } else { t + hs };
            while next_eval < t_eval.len() && (t_eval[next_eval] - t_new) * dir <= 0.0 {
                let s = (t_eval[next_eval] - t) / hs;
                let q = dense_weights(s);
                let yi: Vec<f64> = (0..n).map(|j| y[j] + hs * (0..7).map(|i| q[i] * k[i][j]).sum::<f64>()).collect();
                sol.y.push(yi);
                next_eval += 1;
            }
            sol.accepted += 1;
            t = t_new;
            y.copy_from_slice(&y_new);
            k.swap(0, 6);
            if last {
                break;
            }
            h *= step_factor(en, err_prev, false);
            err_prev = en.max(1e-4);
        } else {
            sol.rejected += 1;
            h *= step_factor(en, err_prev, true);
        }
    }
    while next_eval < t_eval.len() {
        sol.y.push(y.clone());
        next_eval += 1;
    }
    sol.t_final = t;
    sol.y_final = y;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tableau_is_consistent() {
        for (s, row) in A.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            assert!((sum - C[s]).abs() < 1e-14, "row {s}");
        }
        assert!((B.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(E.iter().sum::<f64>().abs() < 1e-14);
        // Dense output reproduces the step end point.
        let q = dense_weights(1.0);
        for i in 0..7 {
            assert!((q[i] - B[i]).abs() < 1e-12, "{i}");
        }
    }

    #[test]
    fn exponential_growth() {
        for rtol in [1e-3, 1e-6, 1e-9] {
            let cfg = Rk45Config::new(rtol, rtol * 1e-3);
            let mut c = NfeCounter::default();
            let sol = rk45_solve(|_, y, out| {
                out[0] = y[0];
                Ok(())
            }, 0.0, &[1.0], 1.0, &[0.5, 1.0], &cfg, &mut c)
            .unwrap();
            let e = std::f64::consts::E;
            assert!((sol.y_final[0] - e).abs() < 10.0 * rtol * e, "rtol {rtol}");
            assert!((sol.y[1][0] - e).abs() < 10.0 * rtol * e);
            assert!((sol.y[0][0] - e.sqrt()).abs() < 10.0 * rtol * e);
            assert_eq!(c.count(), 1 + 6 * (sol.accepted + sol.rejected) as u64);
        }
    }

    #[test]
    fn zero_field_takes_one_step() {
        let cfg = Rk45Config::new(1e-6, 1e-9);
        let mut c = NfeCounter::default();
        let sol = rk45_solve(|_, _, out| {
            out.fill(0.0);
            Ok(())
        }, 0.0, &[2.0, -1.0], 5.0, &[1.0, 5.0], &cfg, &mut c)
        .unwrap();
        assert_eq!(sol.y_final, vec![2.0, -1.0]);
        assert_eq!(sol.y[0], vec![2.0, -1.0]);
        assert!(sol.accepted <= 2, "{} steps", sol.accepted);
        assert_eq!(sol.rejected, 0);
        assert_eq!(c.count(), 1 + 6 * sol.accepted as u64);
    }

    #[test]
    fn backward_integration_and_dense_output() {
        let cfg = Rk45Config::new(1e-10, 1e-12);
        let mut c = NfeCounter::default();
        let times: Vec<f64> = (0..=20).rev().map(|i| i as f64 * 0.1).collect();
        let sol = rk45_solve(|t, y, out| {
            out[0] = y[1];
            out[1] = -y[0] + 0.0 * t;
            Ok(())
        }, 2.0, &[2.0f64.cos(), -2.0f64.sin()], 0.0, &times, &cfg, &mut c)
        .unwrap();
        for (t, y) in sol.t.iter().zip(&sol.y) {
            assert!((y[0] - t.cos()).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn stiff_problem_hits_budget() {
        let mut cfg = Rk45Config::new(1e-8, 1e-10);
        cfg.max_steps = 200;
        let mut c = NfeCounter::default();
        let r = rk45_solve(|_, y, out| {
            out[0] = -1e6 * (y[0] - 1.0);
            Ok(())
        }, 0.0, &[0.0], 10.0, &[], &cfg, &mut c);
        assert!(matches!(r, Err(ref e) if e.is_stiff()));
    }
}
