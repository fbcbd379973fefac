//! Markov Gaussian process posterior: `B(t)`, the drift residual, the
//! reparametrization `z = m + sqrt(S) * eps`, and linear-SDE oracles used to
//! check them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffengine::{cholesky, Array, Tape, Var};
use crate::error::{Error, Result};
use crate::sdesolve::{euler_maruyama_with, rk45_solve, uniform_grid, Dispersion, NfeCounter, Rk45Config};

/// Floor applied to the diagonal posterior covariance.
pub const S_FLOOR: f64 = 1e-8;

/// Posterior moments at a batch of query times, one row per time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Moments {
    pub m: Var,
    pub s: Var,
    pub dm: Var,
    pub ds: Var,
}

/// `0.5 * (c_inv - dS) / S`, elementwise.
pub fn b_matrix_diag(s: &[f64], ds: &[f64], c_inv: &[f64]) -> Result<Vec<f64>> {
    if s.len() != ds.len() || s.len() != c_inv.len() {
        return Err(Error::invalid("b_matrix_diag: dimension mismatch"));
    }
    if s.iter().any(|&v| !(v >= S_FLOOR)) {
        return Err(Error::invalid("b_matrix_diag: covariance below floor"));
    }
    Ok(s.iter().zip(ds).zip(c_inv).map(|((s, ds), c)| 0.5 * (c - ds) / s).collect())
}

/// Kronecker sum `S ⊕ S = I ⊗ S + S ⊗ I` (acting on column-stacked vectors).
pub fn kronecker_sum(s: &Array) -> Array {
    let d = s.rows();
    Array::from_fn(d * d, d * d, |r, c| {
        let (i1, i2) = (r / d, r % d);
        let (j1, j2) = (c / d, c % d);
        let mut v = 0.0;
        if i1 == j1 {
            v += s[(i2, j2)];
        }
        if i2 == j2 {
            v += s[(i1, j1)];
        }
        v
    })
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn lu_solve(a: &Array, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::invalid("lu_solve: shape mismatch"));
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs())).unwrap();
        if m[(piv, col)].abs() <= 1e-14 * scale {
            return Err(Error::Singular("lu_solve"));
        }
        if piv != col {
            for c in 0..n {
                let tmp = m[(col, c)];
                m[(col, c)] = m[(piv, c)];
                m[(piv, c)] = tmp;
            }
            x.swap(col, piv);
        }
        for r in col + 1..n {
            let f = m[(r, col)] / m[(col, col)];
            if f != 0.0 {
                for c in col..n {
                    let v = m[(col, c)];
                    m[(r, c)] -= f * v;
                }
                x[r] -= f * x[col];
            }
        }
    }
    for r in (0..n).rev() {
        let mut acc = x[r];
        for c in r + 1..n {
            acc -= m[(r, c)] * x[c];
        }
        x[r] = acc / m[(r, r)];
    }
    Ok(x)
}

fn vec_cols(a: &Array) -> Vec<f64> {
    let (r, c) = a.shape();
    (0..c).flat_map(|j| (0..r).map(move |i| (i, j))).map(|(i, j)| a[(i, j)]).collect()
}

fn unvec_cols(v: &[f64], d: usize) -> Array {
    Array::from_fn(d, d, |i, j| v[j * d + i])
}

/// Solves `(S ⊕ S) vec(B) = vec(Q - dS)` for `B`, where `Q = L Σ Lᵀ`.
pub fn b_matrix_full(s: &Array, ds: &Array, q: &Array) -> Result<Array> {
    let d = s.rows();
    if s.shape() != (d, d) || ds.shape() != (d, d) || q.shape() != (d, d) {
        return Err(Error::invalid("b_matrix_full: expected square matrices of equal size"));
    }
    let rhs = q.zip_map(ds, |a, b| a - b);
    let sol = lu_solve(&kronecker_sum(s), &vec_cols(&rhs))?;
    Ok(unvec_cols(&sol, d))
}

/// Frobenius norm of `B S + S Bᵀ - (Q - dS)`.
pub fn lyapunov_residual(b: &Array, s: &Array, ds: &Array, q: &Array) -> f64 {
    let lhs = b.matmul(s);
    let lhs2 = s.matmul_t(b);
    let mut acc = 0.0;
    for i in 0..s.rows() {
        for j in 0..s.cols() {
            let v = lhs[(i, j)] + lhs2[(i, j)] - (q[(i, j)] - ds[(i, j)]);
            acc += v * v;
        }
    }
    acc.sqrt()
}

/// Residual `r = B (m - z) + dm - f` and `sum_j r_j^2 / c_inv_j` for one state.
pub fn residual_values(f_val: &[f64], m: &[f64], s: &[f64], dm: &[f64], ds: &[f64], z: &[f64], c_inv: &[f64]) -> Result<(Vec<f64>, f64)> {
    let b = b_matrix_diag(s, ds, c_inv)?;
    let r: Vec<f64> = (0..m.len()).map(|j| b[j] * (m[j] - z[j]) + dm[j] - f_val[j]).collect();
    let w = r.iter().zip(c_inv).map(|(r, c)| r * r / c).sum();
    Ok((r, w))
}

/// `m + sqrt(S) * eps` for one state.
pub fn reparam_values(m: &[f64], s: &[f64], eps: &[f64]) -> Vec<f64> {
    m.iter().zip(s).zip(eps).map(|((m, s), e)| m + s.sqrt() * e).collect()
}

/// Batched `B(t)` on the tape; `c_inv` is a `1 x d` row.
pub fn b_diag(tape: &mut Tape, mo: &Moments, c_inv: Var) -> Result<Var> {
    let neg = tape.neg(mo.ds)?;
    let num = tape.add_row(neg, c_inv)?;
    let q = tape.div(num, mo.s)?;
    tape.scale(q, 0.5)
}

/// Batched residual on the tape. Returns `r` (`n x d`) and the per-row
/// weighted squared norm `sum_j r_j^2 / c_inv_j` (`n x 1`).
pub fn residual(tape: &mut Tape, f_val: Var, mo: &Moments, z: Var, c_inv: Var) -> Result<(Var, Var)> {
    let b = b_diag(tape, mo, c_inv)?;
    let mz = tape.sub(mo.m, z)?;
    let bmz = tape.mul(b, mz)?;
    let r = tape.add(bmz, mo.dm)?;
    let r = tape.sub(r, f_val)?;
    let sq = tape.square(r)?;
    let d = tape.value(c_inv).cols();
    let ones = tape.constant(Array::ones(1, d));
    let inv = tape.div(ones, c_inv)?;
    let inv_col = tape.transpose(inv)?;
    let w = tape.matmul(sq, inv_col)?;
    Ok((r, w))
}

/// Batched reparametrization `m + sqrt(S) * eps` on the tape.
pub fn reparam(tape: &mut Tape, mo: &Moments, eps: Var) -> Result<Var> {
    let sd = tape.sqrt(mo.s)?;
    let noise = tape.mul(sd, eps)?;
    tape.add(mo.m, noise)
}

/// Moments of `dz = -a z dt + sigma dW` at time `t`.
pub fn ou_moments_analytic(a: f64, sigma2: f64, m0: f64, s0: f64, t: f64) -> Result<(f64, f64)> {
    if !(a > 0.0) {
        return Err(Error::invalid("ou_moments_analytic: a must be positive"));
    }
    let stat = sigma2 / (2.0 * a);
    Ok((m0 * (-a * t).exp(), stat + (s0 - stat) * (-2.0 * a * t).exp()))
}

/// Linear SDE `dz = (-A z + b) dt + L dW` with constant coefficients and
/// `Q = L Σ Lᵀ`, started from `N(m0, S0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSdeOracle {
    pub a: Array,
    pub b: Vec<f64>,
    pub q: Array,
    pub m0: Vec<f64>,
    pub s0: Array,
}

/// Full moments and their time derivatives at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct FullMoments {
    pub m: Vec<f64>,
    pub s: Array,
    pub dm: Vec<f64>,
    pub ds: Array,
}

impl LinearSdeOracle {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn rates(&self, m: &[f64], s: &Array) -> (Vec<f64>, Array) {
        let d = self.dim();
        let am = self.a.matmul(&Array::col(m));
        let dm = (0..d).map(|i| -am.as_slice()[i] + self.b[i]).collect();
        let as_ = self.a.matmul(s);
        let sa = s.matmul_t(&self.a);
        let ds = Array::from_fn(d, d, |i, j| -as_[(i, j)] - sa[(i, j)] + self.q[(i, j)]);
        (dm, ds)
    }

    /// Integrates the moment equations to time `t`.
    pub fn moments_at(&self, t: f64, rtol: f64) -> Result<FullMoments> {
        let d = self.dim();
        let mut y0 = self.m0.clone();
        y0.extend_from_slice(self.s0.as_slice());
        let sol = rk45_solve(
            |_, y, out| {
                let s = Array::from_vec(d, d, y[d..].to_vec());
                let (dm, ds) = self.rates(&y[..d], &s);
                out[..d].copy_from_slice(&dm);
                out[d..].copy_from_slice(ds.as_slice());
                Ok(())
            },
            0.0,
            &y0,
            t,
            &[],
            &Rk45Config::new(rtol, rtol * 1e-2),
            &mut NfeCounter::default(),
        )?;
        let m = sol.y_final[..d].to_vec();
        let s = Array::from_vec(d, d, sol.y_final[d..].to_vec());
        let (dm, ds) = self.rates(&m, &s);
        Ok(FullMoments { m, s, dm, ds })
    }
}

/// Two Monte Carlo estimates of the same expectation with their standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
}

impl IdentityCheck {
    pub fn combined_se(&self) -> f64 {
        (self.lhs_se.powi(2) + self.rhs_se.powi(2)).sqrt()
    }

    pub fn z_score(&self) -> f64 {
        (self.lhs - self.rhs).abs() / self.combined_se().max(f64::MIN_POSITIVE)
    }
}

fn mean_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Compares `E[f(A, b, z(t))]` with `z(t)` simulated by Euler–Maruyama
/// (step `dt`) against `E[f(B, dm + B m, z)]` with `z ~ N(m(t), S(t))`, where
/// `B` comes from the Kronecker-sum solve.
pub fn expectation_identity_check<F>(oracle: &LinearSdeOracle, functional: F, t: f64, samples: usize, dt: f64, seed: u64) -> Result<IdentityCheck>
where
    F: Fn(&Array, &[f64], &[f64]) -> f64,
{
    let d = oracle.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l0 = cholesky(&oracle.s0).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let draw = |rng: &mut ChaCha8Rng, m: &[f64], l: &Array| -> Vec<f64> {
        let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        (0..d).map(|i| m[i] + (0..=i).map(|j| l[(i, j)] * e[j]).sum::<f64>()).collect()
    };

    let z0 = {
        let mut z = Array::zeros(samples, d);
        for i in 0..samples {
            let row = draw(&mut rng, &oracle.m0, &l0);
            z.row_slice_mut(i).copy_from_slice(&row);
        }
        z
    };
    let lq = cholesky(&oracle.q).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let a_t = oracle.a.transpose();
    let grid = uniform_grid(0.0, t, dt);
    let last = grid.len() - 1;
    let mut end = None;
    euler_maruyama_with(
        |z, _| {
            let mut f = z.matmul(&a_t).scale(-1.0);
            for i in 0..f.rows() {
                for (v, b) in f.row_slice_mut(i).iter_mut().zip(&oracle.b) {
                    *v += b;
                }
            }
            Ok(f)
        },
        &Dispersion::Full(lq),
        &z0,
        &grid,
        &mut rng,
        |k, z| {
            if k == last {
                end = Some(z.clone());
            }
        },
    )?;
    let end = end.expect("grid has a final point");
    let lhs_vals: Vec<f64> = (0..samples).map(|i| functional(&oracle.a, &oracle.b, end.row_slice(i))).collect();

    let mo = oracle.moments_at(t, 1e-11)?;
    let b = b_matrix_full(&mo.s, &mo.ds, &oracle.q)?;
    let bm = b.matmul(&Array::col(&mo.m));
    let b_vec: Vec<f64> = (0..d).map(|i| mo.dm[i] + bm.as_slice()[i]).collect();
    let ls = cholesky(&mo.s).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let rhs_vals: Vec<f64> = (0..samples)
        .map(|_| {
            let z = draw(&mut rng, &mo.m, &ls);
            functional(&b, &b_vec, &z)
        })
        .collect();
    let (lhs, lhs_se) = mean_se(&lhs_vals);
    let (rhs, rhs_se) = mean_se(&rhs_vals);
    Ok(IdentityCheck { lhs, lhs_se, rhs, rhs_se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Array {
        let g = Array::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let mut s = g.matmul_t(&g);
        for i in 0..d {
            s[(i, i)] += 0.5;
        }
        s
    }

    fn random_sym(rng: &mut ChaCha8Rng, d: usize) -> Array {
        let g = Array::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        Array::from_fn(d, d, |i, j| g[(i, j)] + g[(j, i)])
    }

    #[test]
    fn diagonal_b_examples() {
        assert_eq!(b_matrix_diag(&[1.0, 1.0], &[0.0, 0.0], &[2.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(b_matrix_diag(&[0.3, 2.0], &[0.7, 1.1], &[0.7, 1.1]).unwrap(), vec![0.0, 0.0]);
        assert!(b_matrix_diag(&[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn full_b_identity_case() {
        let b = b_matrix_full(&Array::identity(3), &Array::zeros(3, 3), &Array::identity(3).scale(2.0)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((b[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn full_b_solves_lyapunov_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_spd(&mut rng, 4);
        let ds = random_sym(&mut rng, 4);
        let q = random_spd(&mut rng, 4);
        let b = b_matrix_full(&s, &ds, &q).unwrap();
        assert!(lyapunov_residual(&b, &s, &ds, &q) < 1e-10);
    }

    #[test]
    fn diagonal_inputs_reduce_to_fast_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..2.0)).collect();
        let ds: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..2.0)).collect();
        let diag = |v: &[f64]| Array::from_fn(3, 3, |i, j| if i == j { v[i] } else { 0.0 });
        let full = b_matrix_full(&diag(&s), &diag(&ds), &diag(&c)).unwrap();
        let fast = b_matrix_diag(&s, &ds, &c).unwrap();
        for i in 0..3 {
            assert!((full[(i, i)] - fast[i]).abs() < 1e-12);
        }
        assert!(full.as_slice().iter().enumerate().filter(|(k, _)| k % 4 != 0).all(|(_, v)| v.abs() < 1e-12));
    }

    #[test]
    fn singular_kronecker_sum_is_reported() {
        let s = Array::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
        assert!(matches!(b_matrix_full(&s, &Array::zeros(2, 2), &Array::identity(2)), Err(Error::Singular(_))));
    }

    #[test]
    fn residual_vanishes_for_matching_drift() {
        let (m, s, dm, ds, c) = ([0.3, -1.0], [0.5, 2.0], [0.1, 0.4], [-0.2, 0.3], [1.5, 0.7]);
        let z = [1.0, 0.25];
        let b = b_matrix_diag(&s, &ds, &c).unwrap();
        let f: Vec<f64> = (0..2).map(|j| b[j] * (m[j] - z[j]) + dm[j]).collect();
        let (r, w) = residual_values(&f, &m, &s, &dm, &ds, &z, &c).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-15) && w < 1e-30);
        // At z = m only dm - f remains.
        let f2 = [0.7, -0.2];
        let (r, _) = residual_values(&f2, &m, &s, &dm, &ds, &m, &c).unwrap();
        assert_eq!(r, vec![dm[0] - f2[0], dm[1] - f2[1]]);
    }

    #[test]
    fn tape_residual_matches_plain() {
        let mut tape = Tape::new();
        let rows = [[0.3, -1.0, 0.5, 2.0, 0.1, 0.4, -0.2, 0.3, 1.0, 0.25, 0.9, 1.1]];
        let col = |k: usize| Array::row(&[rows[0][2 * k], rows[0][2 * k + 1]]);
        let mo = Moments { m: tape.constant(col(0)), s: tape.constant(col(1)), dm: tape.constant(col(2)), ds: tape.constant(col(3)) };
        let z = tape.constant(col(4));
        let f = tape.constant(col(5));
        let c = tape.constant(Array::row(&[1.5, 0.7]));
        let (r, w) = residual(&mut tape, f, &mo, z, c).unwrap();
        let v = |k: usize| col(k).into_vec();
        let (rp, wp) = residual_values(&v(5), &v(0), &v(1), &v(2), &v(3), &v(4), &[1.5, 0.7]).unwrap();
        for (a, b) in tape.value(r).as_slice().iter().zip(&rp) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((tape.value(w).item() - wp).abs() < 1e-14);
    }

    #[test]
    fn exact_ou_moments_give_zero_residual() {
        let (a, sigma2, m0, s0) = (1.3, 0.4, 2.0, 0.05);
        let t = 0.7;
        let (m, s) = ou_moments_analytic(a, sigma2, m0, s0, t).unwrap();
        let dm = -a * m;
        let ds = -2.0 * a * s + sigma2;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = reparam_values(&[m], &[s], &[e]);
            let f = [-a * z[0]];
            total += residual_values(&f, &[m], &[s], &[dm], &[ds], &z, &[sigma2]).unwrap().1;
        }
        assert!(total / n as f64 <= 1e-24);
    }

    #[test]
    fn ou_moments_limits_and_rk45_agreement() {
        let (a, sigma2, m0, s0) = (0.8, 0.6, 1.5, 2.0);
        assert_eq!(ou_moments_analytic(a, sigma2, m0, s0, 0.0).unwrap(), (m0, s0));
        let (_, s_inf) = ou_moments_analytic(a, sigma2, m0, s0, 200.0).unwrap();
        assert!((s_inf - sigma2 / (2.0 * a)).abs() < 1e-15);
        let sol = rk45_solve(
            |_, y, out| {
                out[0] = -a * y[0];
                out[1] = -2.0 * a * y[1] + sigma2;
                Ok(())
            },
            0.0,
            &[m0, s0],
            3.0,
            &[0.5, 1.0, 3.0],
            &Rk45Config::new(1e-10, 1e-12),
            &mut NfeCounter::default(),
        )
        .unwrap();
        for (t, y) in sol.t.iter().zip(&sol.y) {
            let (m, s) = ou_moments_analytic(a, sigma2, m0, s0, *t).unwrap();
            assert!((y[0] - m).abs() < 1e-8 && (y[1] - s).abs() < 1e-8);
        }
        assert!(ou_moments_analytic(0.0, 1.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn reparametrized_draws_have_requested_moments() {
        let (m, s) = ([1.0, -2.0], [4.0, 0.25]);
        assert_eq!(reparam_values(&m, &s, &[0.0, 0.0]), m.to_vec());
        assert_eq!(reparam_values(&[0.5], &[4.0], &[1.0]), vec![2.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let e: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                reparam_values(&m, &s, &e)
            })
            .collect();
        for j in 0..2 {
            let col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
            let (mean, se) = mean_se(&col);
            assert!((mean - m[j]).abs() < 3.0 * se);
            let sq: Vec<f64> = col.iter().map(|v| (v - m[j]).powi(2)).collect();
            let (var, var_se) = mean_se(&sq);
            assert!((var - s[j]).abs() < 3.0 * var_se);
        }
    }

    fn ou_oracle() -> LinearSdeOracle {
        LinearSdeOracle {
            a: Array::from_rows(&[vec![1.0, 0.3], vec![0.3, 0.8]]),
            b: vec![0.5, -0.2],
            q: Array::from_rows(&[vec![0.4, 0.1], vec![0.1, 0.3]]),
            m0: vec![1.0, -1.0],
            s0: Array::from_rows(&[vec![0.2, 0.05], vec![0.05, 0.1]]),
        }
    }

    #[test]
    fn identity_recovers_drift_coefficients() {
        let oracle = ou_oracle();
        let mo = oracle.moments_at(0.8, 1e-11).unwrap();
        let b = b_matrix_full(&mo.s, &mo.ds, &oracle.q).unwrap();
        let bm = b.matmul(&Array::col(&mo.m));
        for i in 0..2 {
            for j in 0..2 {
                assert!((b[(i, j)] - oracle.a[(i, j)]).abs() < 1e-8);
            }
            assert!((mo.dm[i] + bm.as_slice()[i] - oracle.b[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_holds_for_mean_functional() {
        let oracle = ou_oracle();
        for j in 0..2 {
            let chk = expectation_identity_check(&oracle, |_, _, z| z[j], 0.5, 20_000, 1e-3, 11).unwrap();
            assert!(chk.z_score() < 3.0, "{chk:?}");
        }
    }
}
