//! Continuous adjoint sensitivities for a trajectory-matching loss
//! `L = 1/(d N) * sum_i |x_i - y(t_i)|^2`.
//!
//! The forward pass stores the state at every observation time. The backward
//! pass integrates the augmented system `[y, a, g]` one observation interval at
//! a time, restarting `y` from the stored state and adding the loss jump
//! `dL/dy(t_i)` into `a` at each observation.

use crate::diffengine::{Array, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::models::{lorenz_rhs, DriftModel};

use super::rk45::{rk45_solve, Rk45Config};
use super::NfeCounter;

/// A vector field with vector–Jacobian products.
pub trait AdjointField {
    fn dim(&self) -> usize;
    fn num_params(&self) -> usize;
    fn eval(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()>;
    /// Writes `aᵀ ∂f/∂y` into `gy` and `aᵀ ∂f/∂θ` into `gp`.
    fn vjp(&self, t: f64, y: &[f64], a: &[f64], gy: &mut [f64], gp: &mut [f64]) -> Result<()>;
}

/// Lorenz system with parameters `[sigma, beta, rho]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LorenzField {
    pub params: [f64; 3],
}

impl AdjointField for LorenzField {
    fn dim(&self) -> usize {
        3
    }

    fn num_params(&self) -> usize {
        3
    }

    fn eval(&self, _t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        lorenz_rhs(&self.params, y, out);
        Ok(())
    }

    fn vjp(&self, _t: f64, y: &[f64], a: &[f64], gy: &mut [f64], gp: &mut [f64]) -> Result<()> {
        let [sig, beta, rho] = self.params;
        let (x, yy, z) = (y[0], y[1], y[2]);
        // Jacobian rows: [-s, s, 0], [rho - z, -1, -x], [y, x, -beta]
        gy[0] = -sig * a[0] + (rho - z) * a[1] + yy * a[2];
        gy[1] = sig * a[0] - a[1] + x * a[2];
        gy[2] = -x * a[1] - beta * a[2];
        gp[0] = (yy - x) * a[0];
        gp[1] = -z * a[2];
        gp[2] = x * a[1];
        Ok(())
    }
}

/// Any [`DriftModel`] with its trainable entries flattened in name order.
pub struct TapeField<'a> {
    pub drift: &'a DriftModel,
    pub store: &'a ParamStore,
    pub names: Vec<String>,
}

impl<'a> TapeField<'a> {
    pub fn new(drift: &'a DriftModel, store: &'a ParamStore) -> Self {
        let names = drift.param_names(store);
        TapeField { drift, store, names }
    }
}

impl AdjointField for TapeField<'_> {
    fn dim(&self) -> usize {
        self.drift.dim
    }

    fn num_params(&self) -> usize {
        self.names.iter().map(|n| self.store.value(n).map(|v| v.len()).unwrap_or(0)).sum()
    }

    fn eval(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        let f = self.drift.eval_values(self.store, &Array::row(y), t)?;
        out.copy_from_slice(f.as_slice());
        Ok(())
    }

    fn vjp(&self, t: f64, y: &[f64], a: &[f64], gy: &mut [f64], gp: &mut [f64]) -> Result<()> {
        let mut tape = Tape::new();
        let yv = tape.constant(Array::row(y));
        let tv = tape.constant(Array::scalar(t));
        let f = self.drift.eval(&mut tape, self.store, yv, Some(tv))?;
        let av = tape.constant(Array::row(a));
        let prod = tape.mul(f, av)?;
        let out = tape.sum(prod)?;
        gy.copy_from_slice(tape.grad_wrt(out, yv)?.as_slice());
        let grads = tape.gradients(out, 1.0)?;
        let mut off = 0;
        for n in &self.names {
            let len = self.store.value(n)?.len();
            match grads.get(n) {
                Some(g) => gp[off..off + len].copy_from_slice(g.as_slice()),
                None => gp[off..off + len].fill(0.0),
            }
            off += len;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdjointResult {
    pub loss: f64,
    pub grad_params: Vec<f64>,
    pub grad_y0: Vec<f64>,
    pub nfe_forward: u64,
    pub nfe_backward: u64,
}

/// Mean squared trajectory error between `obs` (`N x d`, at `times`) and the
/// solution from `y0` at `times[0]`.
pub fn trajectory_loss<F: AdjointField>(field: &F, y0: &[f64], times: &[f64], obs: &Array, cfg: &Rk45Config, counter: &mut NfeCounter) -> Result<(f64, Vec<Vec<f64>>)> {
    let sol = rk45_solve(|t, y, out| field.eval(t, y, out), times[0], y0, *times.last().unwrap(), times, cfg, counter)?;
    let d = field.dim();
    let mut loss = 0.0;
    for (i, y) in sol.y.iter().enumerate() {
        for j in 0..d {
            loss += (obs[(i, j)] - y[j]).powi(2);
        }
    }
    Ok((loss / (d * times.len()) as f64, sol.y))
}

/// Gradient of [`trajectory_loss`] with respect to the field parameters and
/// the initial state, via the continuous adjoint.
pub fn adjoint_grad<F: AdjointField>(field: &F, y0: &[f64], times: &[f64], obs: &Array, cfg: &Rk45Config, counter: &mut NfeCounter) -> Result<AdjointResult> {
    let (d, p, n) = (field.dim(), field.num_params(), times.len());
    if obs.shape() != (n, d) || y0.len() != d {
        return Err(Error::invalid("adjoint_grad: observation shape does not match the field"));
    }
    if n < 2 {
        return Err(Error::invalid("adjoint_grad: need at least two observation times"));
    }
    let start = counter.count();
    let (loss, states) = trajectory_loss(field, y0, times, obs, cfg, counter)?;
    let nfe_forward = counter.count() - start;
    let scale = 2.0 / (d * n) as f64;
    let jump = |i: usize| -> Vec<f64> { (0..d).map(|j| -scale * (obs[(i, j)] - states[i][j])).collect() };

    let mut a = jump(n - 1);
    let mut g = vec![0.0; p];
    let mut gy = vec![0.0; d];
    let mut gp = vec![0.0; p];
    let mut aug = vec![0.0; 2 * d + p];
    for i in (1..n).rev() {
        aug[..d].copy_from_slice(&states[i]);
        aug[d..2 * d].copy_from_slice(&a);
        aug[2 * d..].copy_from_slice(&g);
        let sol = rk45_solve(
            |t, s, out| {
                let (y, adj) = (&s[..d], &s[d..2 * d]);
                field.eval(t, y, &mut out[..d])?;
                field.vjp(t, y, adj, &mut gy, &mut gp)?;
                for j in 0..d {
                    out[d + j] = -gy[j];
                }
                for k in 0..p {
                    out[2 * d + k] = -gp[k];
                }
                Ok(())
            },
            times[i],
            &aug,
            times[i - 1],
            &[],
            cfg,
            counter,
        )?;
        let end = sol.y_final;
        a.copy_from_slice(&end[d..2 * d]);
        g.copy_from_slice(&end[2 * d..]);
        for (aj, jj) in a.iter_mut().zip(jump(i - 1)) {
            *aj += jj;
        }
        if !a.iter().chain(&g).all(|v| v.is_finite()) {
            return Err(Error::NonFinite { what: "adjoint state".into() });
        }
    }
    Ok(AdjointResult { loss, grad_params: g, grad_y0: a, nfe_forward, nfe_backward: counter.count() - start - nfe_forward })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lorenz_data(t_end: f64, params: [f64; 3]) -> (Vec<f64>, Array) {
        let times: Vec<f64> = (0..(200.0 * t_end) as usize).map(|i| i as f64 / 200.0).collect();
        let field = LorenzField { params };
        let cfg = Rk45Config::new(1e-10, 1e-12);
        let sol = rk45_solve(|t, y, o| field.eval(t, y, o), 0.0, &[8.0, -2.0, 36.05], *times.last().unwrap(), &times, &cfg, &mut NfeCounter::default()).unwrap();
        let obs = Array::from_fn(times.len(), 3, |i, j| sol.y[i][j]);
        (times, obs)
    }

    #[test]
    fn lorenz_vjp_matches_finite_differences() {
        let f = LorenzField { params: [9.0, 2.2, 30.0] };
        let y = [1.0, -2.0, 20.0];
        let a = [0.3, -0.7, 1.1];
        let (mut gy, mut gp) = ([0.0; 3], [0.0; 3]);
        f.vjp(0.0, &y, &a, &mut gy, &mut gp).unwrap();
        let h = 1e-6;
        let dot = |fld: &LorenzField, y: &[f64]| {
            let mut o = [0.0; 3];
            fld.eval(0.0, y, &mut o).unwrap();
            o.iter().zip(&a).map(|(x, w)| x * w).sum::<f64>()
        };
        for j in 0..3 {
            let (mut up, mut dn) = (y, y);
            up[j] += h;
            dn[j] -= h;
            assert!(((dot(&f, &up) - dot(&f, &dn)) / (2.0 * h) - gy[j]).abs() < 1e-6);
            let (mut pu, mut pd) = (f.clone(), f.clone());
            pu.params[j] += h;
            pd.params[j] -= h;
            assert!(((dot(&pu, &y) - dot(&pd, &y)) / (2.0 * h) - gp[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_fit_gives_zero_gradient() {
        let theta = [10.0, 8.0 / 3.0, 28.0];
        let (times, obs) = lorenz_data(0.2, theta);
        let cfg = Rk45Config::new(1e-10, 1e-12);
        let r = adjoint_grad(&LorenzField { params: theta }, &[8.0, -2.0, 36.05], &times, &obs, &cfg, &mut NfeCounter::default()).unwrap();
        assert!(r.loss < 1e-16);
        assert!(r.grad_params.iter().all(|g| g.abs() < 1e-6), "{:?}", r.grad_params);
    }

    #[test]
    fn lorenz_short_horizon_matches_finite_differences() {
        let (times, obs) = lorenz_data(1.0, [10.0, 8.0 / 3.0, 28.0]);
        let theta = [11.0, 2.5, 26.5];
        let y0 = [8.0, -2.0, 36.05];
        let cfg = Rk45Config::new(1e-10, 1e-12);
        let mut c = NfeCounter::default();
        let r = adjoint_grad(&LorenzField { params: theta }, &y0, &times, &obs, &cfg, &mut c).unwrap();
        let h = 1e-5;
        for k in 0..3 {
            let (mut up, mut dn) = (theta, theta);
            up[k] += h;
            dn[k] -= h;
            let lu = trajectory_loss(&LorenzField { params: up }, &y0, &times, &obs, &cfg, &mut c).unwrap().0;
            let ld = trajectory_loss(&LorenzField { params: dn }, &y0, &times, &obs, &cfg, &mut c).unwrap().0;
            let fd = (lu - ld) / (2.0 * h);
            assert!((r.grad_params[k] - fd).abs() / fd.abs().max(1e-8) < 1e-3, "param {k}: {} vs {fd}", r.grad_params[k]);
        }
    }
}
