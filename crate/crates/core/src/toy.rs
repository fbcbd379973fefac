//! Small fixed problems for gradient and estimator checks, and reference
//! values for the objective computed by quadrature instead of sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffengine::{Array, ParamStore, Tape};
use crate::elbo::{LatentSdeModel, LogNormalPosterior};
use crate::encoder::{partition, DeepKernel, Encoder, Partition, PartitionPlan};
use crate::error::Result;
use crate::models::{Activation, DriftModel, GaussianLikelihood, Mlp, MlpSpec};
use crate::quadrature::{gauss_hermite, normal_expectation};

/// One-dimensional latent SDE with tiny tanh nets and `m` observations of a
/// damped sine, all in one window.
pub fn scalar_problem(m: usize, seed: u64) -> Result<(LatentSdeModel, ParamStore, Partition)> {
    let net = Mlp::new("enc", MlpSpec::new(vec![1, 3, 2], Activation::Tanh).with_residual(true))?.with_residual_width(1);
    let dk = Mlp::new("dk.net", MlpSpec::new(vec![1, 3, 1], Activation::Tanh))?;
    let encoder = Encoder::new(net, DeepKernel::new("dk", Some(dk))?, 0, 1)?;
    let drift = DriftModel::mlp("drift", 1, &[4], Activation::Tanh)?;
    let likelihood = GaussianLikelihood::identity(1, 0.3)?;
    let diffusion = LogNormalPosterior::new("diff", vec![0.0], vec![1.0])?;
    let model = LatentSdeModel { encoder, drift, likelihood, diffusion };

    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.encoder.init(&mut store, &mut rng, 0.5, 1.0, 0.1);
    model.drift.init(&mut store, &mut rng);
    model.diffusion.init(&mut store, -0.5, 0.3);
    // Push the log-variance head towards moderate values.
    let b = model.encoder.net.bias_name(model.encoder.net.spec.widths.len() - 2);
    store.value_mut(&b)?.as_mut_slice()[1] = -1.0;

    let times: Vec<f64> = (0..m).map(|i| 0.25 * i as f64).collect();
    let obs = Array::from_fn(m, 1, |i, _| (-0.2 * times[i]).exp() * (2.0 * times[i]).sin());
    let part = partition(&times, &obs, &PartitionPlan { m, k: 0 })?.remove(0);
    Ok((model, store, part))
}

/// Moments `(m, S, dm, dS)` of a scalar latent at the times `t`.
pub fn scalar_moments(model: &LatentSdeModel, store: &ParamStore, part: &Partition, t: &[f64]) -> Result<[Vec<f64>; 4]> {
    let mut tape = Tape::new();
    let mut enc = model.encoder.encode_nodes(&mut tape, store, part)?;
    let mo = model.encoder.interpolate(&mut tape, store, &mut enc, t)?;
    Ok([mo.m, mo.s, mo.dm, mo.ds].map(|v| tape.value(v).as_slice().to_vec()))
}

/// Reference value of `(LL, RES)` for a scalar latent with diffusion `c_inv`,
/// using `gh` Gauss–Hermite nodes in `z` and `n_t` trapezoid intervals in `t`.
pub fn scalar_reference(model: &LatentSdeModel, store: &ParamStore, part: &Partition, c_inv: f64, gh: usize, n_t: usize) -> Result<(f64, f64)> {
    let var = model.likelihood.noise_variance[0];
    let [m, s, _, _] = scalar_moments(model, store, part, &part.times)?;
    let mut ll = 0.0;
    for i in 0..part.len() {
        let x = part.obs[(i, 0)];
        ll += normal_expectation(m[i], s[i], gh, |z| -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - z).powi(2) / (2.0 * var));
    }

    let (a, b) = (part.t_start, part.t_end);
    let grid: Vec<f64> = (0..=n_t).map(|k| a + (b - a) * k as f64 / n_t as f64).collect();
    let [m, s, dm, ds] = scalar_moments(model, store, part, &grid)?;
    let (nodes, weights) = gauss_hermite(gh);
    let mut inner = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let bk = 0.5 * (c_inv - ds[k]) / s[k];
        let sd = (2.0 * s[k]).sqrt();
        let z: Vec<f64> = nodes.iter().map(|x| m[k] + sd * x).collect();
        let f = model.drift.eval_values(store, &Array::col(&z), grid[k])?;
        let e: f64 = (0..gh)
            .map(|q| {
                let r = bk * (m[k] - z[q]) + dm[k] - f.as_slice()[q];
                weights[q] * r * r / c_inv
            })
            .sum();
        inner.push(e / std::f64::consts::PI.sqrt());
    }
    let h = (b - a) / n_t as f64;
    let res = 0.5 * h * (inner.iter().sum::<f64>() - 0.5 * (inner[0] + inner[n_t]));
    Ok((ll, res))
}
