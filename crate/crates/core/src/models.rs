//! Parametric building blocks: MLPs, drift functions and the Gaussian
//! observation model.
//!
//! All batched functions are row-wise: an `n x d` input holds `n` independent
//! states, one per row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Array, Dual, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths..., output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Skip connection from the leading input columns to the leading outputs.
    pub residual_input_to_mean: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        MlpSpec { widths, activation, residual_input_to_mean: false }
    }

    pub fn with_residual(mut self, on: bool) -> Self {
        self.residual_input_to_mean = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::invalid("an MLP needs at least one hidden layer"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("MLP widths must be positive"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// An MLP whose weights live in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub spec: MlpSpec,
    /// Width of the residual skip (columns copied from input to output).
    pub residual_width: usize,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let residual_width = if spec.residual_input_to_mean { spec.input_width().min(spec.output_width()) } else { 0 };
        Ok(Mlp { prefix: prefix.into(), spec, residual_width })
    }

    /// Restricts the residual skip to the first `width` columns.
    pub fn with_residual_width(mut self, width: usize) -> Self {
        if self.spec.residual_input_to_mean {
            self.residual_width = width.min(self.spec.input_width()).min(self.spec.output_width());
        }
        self
    }

    fn layers(&self) -> usize {
        self.spec.widths.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a));
            store.insert(self.weight_name(l), w);
            store.insert(self.bias_name(l), Array::zeros(1, fan_out));
        }
    }

    /// Sets the last layer's weights and bias to zero.
    pub fn zero_output_layer(&self, store: &mut ParamStore) -> Result<()> {
        let l = self.layers() - 1;
        store.value_mut(&self.weight_name(l))?.as_mut_slice().fill(0.0);
        store.value_mut(&self.bias_name(l))?.as_mut_slice().fill(0.0);
        Ok(())
    }

    fn residual_matrix(&self) -> Array {
        let (i, o) = (self.spec.input_width(), self.spec.output_width());
        Array::from_fn(i, o, |r, c| if r == c && c < self.residual_width { 1.0 } else { 0.0 })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        if shape.1 != self.spec.input_width() {
            return Err(Error::Shape { op: "mlp", lhs: shape, rhs: (shape.0, self.spec.input_width()) });
        }
        Ok(())
    }

    /// Applies the network to each row of `x` (`n x in`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_dual(tape, store, Dual::constant(x))?.v)
    }

    /// As [`Mlp::forward`], propagating a tangent alongside the values.
    pub fn forward_dual(&self, tape: &mut Tape, store: &ParamStore, x: Dual) -> Result<Dual> {
        self.check_input(tape, x.v)?;
        let mut h = x;
        for l in 0..self.layers() {
            let w = tape.param(store, &self.weight_name(l))?;
            let b = tape.param(store, &self.bias_name(l))?;
            h = tape.d_matmul(h, Dual::constant(w))?;
            h = tape.d_add_row(h, b)?;
            if l + 1 < self.layers() {
                h = match self.spec.activation {
                    Activation::Tanh => tape.d_tanh(h)?,
                    Activation::Relu => tape.d_relu(h)?,
                };
            }
        }
        if self.residual_width > 0 {
            let p = tape.constant(self.residual_matrix());
            let skip = tape.d_matmul(x, Dual::constant(p))?;
            h = tape.d_add(h, skip)?;
        }
        Ok(h)
    }

    /// Evaluates the network on plain values without keeping a graph.
    pub fn eval(&self, store: &ParamStore, x: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// Drift function of the latent SDE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DriftKind {
    /// Neural drift. With `time_feature`, the input is `[z, t]`.
    Mlp { net: Mlp, time_feature: bool },
    /// Lorenz system with trainable `(sigma, beta, rho)` stored as a `1 x 3` row.
    Lorenz { param: String },
    /// Fixed linear drift `f(z) = A z`.
    Linear { a: Array },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    pub kind: DriftKind,
    pub dim: usize,
}

impl DriftModel {
    pub fn mlp(prefix: &str, dim: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let net = Mlp::new(prefix, MlpSpec::new(widths, activation))?;
        Ok(DriftModel { kind: DriftKind::Mlp { net, time_feature: false }, dim })
    }

    pub fn mlp_with_time(prefix: &str, dim: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        let mut widths = vec![dim + 1];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let net = Mlp::new(prefix, MlpSpec::new(widths, activation))?;
        Ok(DriftModel { kind: DriftKind::Mlp { net, time_feature: true }, dim })
    }

    pub fn lorenz(param: &str) -> Self {
        DriftModel { kind: DriftKind::Lorenz { param: param.to_string() }, dim: 3 }
    }

    pub fn linear(a: Array) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::invalid("linear drift needs a square matrix"));
        }
        let dim = a.rows();
        Ok(DriftModel { kind: DriftKind::Linear { a }, dim })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        match &self.kind {
            DriftKind::Mlp { net, .. } => net.init(store, rng),
            DriftKind::Lorenz { param } => store.insert(param.clone(), Array::row(&[10.0, 8.0 / 3.0, 28.0])),
            DriftKind::Linear { .. } => {}
        }
    }

    /// Names of the trainable entries owned by this drift.
    pub fn param_names(&self, store: &ParamStore) -> Vec<String> {
        match &self.kind {
            DriftKind::Mlp { net, .. } => {
                let p = format!("{}.", net.prefix);
                store.names().filter(|n| n.starts_with(&p)).map(str::to_string).collect()
            }
            DriftKind::Lorenz { param } => vec![param.clone()],
            DriftKind::Linear { .. } => vec![],
        }
    }

    /// `f(z, t)` for each row of `z` (`n x d`); `t` is `n x 1` and is read only
    /// when the drift depends on time.
    pub fn eval(&self, tape: &mut Tape, store: &ParamStore, z: Var, t: Option<Var>) -> Result<Var> {
        let (n, d) = tape.value(z).shape();
        if d != self.dim {
            return Err(Error::Shape { op: "drift", lhs: (n, d), rhs: (n, self.dim) });
        }
        match &self.kind {
            DriftKind::Mlp { net, time_feature } => {
                let input = if *time_feature {
                    let t = t.ok_or_else(|| Error::invalid("time-dependent drift evaluated without t"))?;
                    tape.concat_cols(&[z, t])?
                } else {
                    z
                };
                net.forward(tape, store, input)
            }
            DriftKind::Lorenz { param } => {
                let p = tape.param(store, param)?;
                let (sig, beta, rho) = (tape.slice_cols(p, 0, 1)?, tape.slice_cols(p, 1, 2)?, tape.slice_cols(p, 2, 3)?);
                let x = tape.slice_cols(z, 0, 1)?;
                let y = tape.slice_cols(z, 1, 2)?;
                let w = tape.slice_cols(z, 2, 3)?;
                let ymx = tape.sub(y, x)?;
                let dx = tape.scale_by(sig, ymx)?;
                let ones = tape.constant(Array::ones(n, 1));
                let rho_col = tape.scale_by(rho, ones)?;
                let rmz = tape.sub(rho_col, w)?;
                let xr = tape.mul(x, rmz)?;
                let dy = tape.sub(xr, y)?;
                let xy = tape.mul(x, y)?;
                let bz = tape.scale_by(beta, w)?;
                let dz = tape.sub(xy, bz)?;
                tape.concat_cols(&[dx, dy, dz])
            }
            DriftKind::Linear { a } => {
                let at = tape.constant(a.transpose());
                tape.matmul(z, at)
            }
        }
    }

    /// Plain evaluation for solvers; rejects non-finite states.
    pub fn eval_values(&self, store: &ParamStore, z: &Array, t: f64) -> Result<Array> {
        if !z.all_finite() {
            return Err(Error::NonFinite { what: "drift input".into() });
        }
        match &self.kind {
            DriftKind::Lorenz { param } => {
                let p = store.value(param)?.as_slice();
                let mut out = Array::zeros(z.rows(), 3);
                for i in 0..z.rows() {
                    let s = z.row_slice(i);
                    lorenz_rhs(p, s, out.row_slice_mut(i));
                }
                Ok(out)
            }
            DriftKind::Linear { a } => Ok(z.matmul_t(a)),
            DriftKind::Mlp { .. } => {
                let mut tape = Tape::new();
                let zv = tape.constant(z.clone());
                let tv = tape.constant(Array::filled(z.rows(), 1, t));
                let out = self.eval(&mut tape, store, zv, Some(tv))?;
                Ok(tape.value(out).clone())
            }
        }
    }
}

/// Lorenz vector field with `p = [sigma, beta, rho]`.
pub fn lorenz_rhs(p: &[f64], s: &[f64], out: &mut [f64]) {
    let (sig, beta, rho) = (p[0], p[1], p[2]);
    out[0] = sig * (s[1] - s[0]);
    out[1] = s[0] * (rho - s[2]) - s[1];
    out[2] = s[0] * s[1] - beta * s[2];
}

/// Maps latent states to the mean of the observation density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Decoder {
    Identity,
    Mlp(Mlp),
}

impl Decoder {
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        match self {
            Decoder::Identity => Ok(z),
            Decoder::Mlp(net) => net.forward(tape, store, z),
        }
    }
}

/// Independent Gaussian observation noise with a fixed per-dimension variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLikelihood {
    pub decoder: Decoder,
    pub noise_variance: Vec<f64>,
}

impl GaussianLikelihood {
    pub fn new(decoder: Decoder, noise_variance: Vec<f64>) -> Result<Self> {
        if noise_variance.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("noise variance must be positive"));
        }
        Ok(GaussianLikelihood { decoder, noise_variance })
    }

    pub fn identity(dim: usize, sd: f64) -> Result<Self> {
        Self::new(Decoder::Identity, vec![sd * sd; dim])
    }

    /// Total log density of the rows of `x` (`n x D`) given latent rows `z`.
    pub fn log_lik(&self, tape: &mut Tape, store: &ParamStore, x: Var, z: Var) -> Result<Var> {
        let mu = self.decoder.decode(tape, store, z)?;
        let (n, dd) = tape.value(x).shape();
        if dd != self.noise_variance.len() {
            return Err(Error::Shape { op: "log_lik", lhs: (n, dd), rhs: (n, self.noise_variance.len()) });
        }
        let diff = tape.sub(x, mu)?;
        let sq = tape.square(diff)?;
        let w = Array::from_fn(dd, 1, |j, _| -0.5 / self.noise_variance[j]);
        let w = tape.constant(w);
        let quad = tape.matmul(sq, w)?;
        let quad = tape.sum(quad)?;
        let norm: f64 = self.noise_variance.iter().map(|v| -0.5 * (2.0 * std::f64::consts::PI * v).ln()).sum();
        tape.offset(quad, norm * n as f64)
    }
}

/// `sum_j [-0.5 log(2 pi var_j) - (x_j - mu_j)^2 / (2 var_j)]`.
pub fn gauss_loglik(x: &[f64], mu: &[f64], var: &[f64]) -> Result<f64> {
    if x.len() != mu.len() || x.len() != var.len() {
        return Err(Error::invalid("gauss_loglik: dimension mismatch"));
    }
    let mut total = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mu).zip(var) {
        if !(*vi > 0.0) {
            return Err(Error::invalid("gauss_loglik: variance must be positive"));
        }
        total += -0.5 * (2.0 * std::f64::consts::PI * vi).ln() - (xi - mi).powi(2) / (2.0 * vi);
    }
    Ok(total)
}
