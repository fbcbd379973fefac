//! Euler–Maruyama for `dz = f(z, t) dt + L dW`, many paths at once.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffengine::Array;
use crate::error::{Error, Result};

/// Noise model of the SDE.
#[derive(Clone, Debug, PartialEq)]
pub enum Dispersion {
    None,
    /// Independent noise, increment SD `sd_j * sqrt(dt)` per dimension.
    Diag(Vec<f64>),
    /// Full `L` (`d x d`) applied to standard Brownian increments.
    Full(Array),
}

impl Dispersion {
    /// Dispersion whose diffusion matrix `L Lᵀ` is `diag(c_inv)`.
    pub fn from_c_inv(c_inv: &[f64]) -> Self {
        Dispersion::Diag(c_inv.iter().map(|v| v.sqrt()).collect())
    }
}

/// Runs every row of `z0` along `t_grid`, calling `observe(index, state)` at
/// each grid point (including the start). Noise is drawn row by row from `rng`.
pub fn euler_maruyama_with<F, O>(
    mut drift: F,
    disp: &Dispersion,
    z0: &Array,
    t_grid: &[f64],
    rng: &mut ChaCha8Rng,
    mut observe: O,
) -> Result<()>
where
    F: FnMut(&Array, f64) -> Result<Array>,
    O: FnMut(usize, &Array),
{
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("euler_maruyama: time grid must be strictly increasing"));
    }
    let (n, d) = z0.shape();
    match disp {
        Dispersion::Diag(s) if s.len() != d => return Err(Error::invalid("euler_maruyama: dispersion size")),
        Dispersion::Full(l) if l.shape() != (d, d) => return Err(Error::invalid("euler_maruyama: dispersion shape")),
        _ => {}
    }
    let mut z = z0.clone();
    observe(0, &z);
    let mut xi = vec![0.0; d];
    for step in 1..t_grid.len() {
        let (t, dt) = (t_grid[step - 1], t_grid[step] - t_grid[step - 1]);
        let f = drift(&z, t)?;
        if f.shape() != (n, d) {
            return Err(Error::Shape { op: "euler_maruyama", lhs: f.shape(), rhs: (n, d) });
        }
        let sq = dt.sqrt();
        for i in 0..n {
            let row = z.row_slice_mut(i);
            let fr = f.row_slice(i);
            for j in 0..d {
                row[j] += fr[j] * dt;
            }
            match disp {
                Dispersion::None => {}
                Dispersion::Diag(s) => {
                    for j in 0..d {
                        let e: f64 = StandardNormal.sample(rng);
                        row[j] += s[j] * sq * e;
                    }
                }
                Dispersion::Full(l) => {
                    for x in xi.iter_mut() {
                        *x = StandardNormal.sample(rng);
                    }
                    for j in 0..d {
                        row[j] += sq * (0..d).map(|c| l[(j, c)] * xi[c]).sum::<f64>();
                    }
                }
            }
        }
        if !z.all_finite() {
            return Err(Error::NonFiniteState { step, t: t_grid[step] });
        }
        observe(step, &z);
    }
    Ok(())
}

/// As [`euler_maruyama_with`], returning the state at every grid point.
pub fn euler_maruyama<F>(drift: F, disp: &Dispersion, z0: &Array, t_grid: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<Array>>
where
    F: FnMut(&Array, f64) -> Result<Array>,
{
    let mut out = Vec::with_capacity(t_grid.len());
    euler_maruyama_with(drift, disp, z0, t_grid, rng, |_, z| out.push(z.clone()))?;
    Ok(out)
}

/// Uniform grid `t0, t0 + dt, ...` ending exactly at `t1`.
pub fn uniform_grid(t0: f64, t1: f64, dt: f64) -> Vec<f64> {
    let n = ((t1 - t0) / dt).round().max(1.0) as usize;
    (0..=n).map(|i| if i == n { t1 } else { t0 + (t1 - t0) * i as f64 / n as f64 }).collect()
}
