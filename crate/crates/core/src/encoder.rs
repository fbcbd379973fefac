//! Amortized posterior over consecutive windows of observations.
//!
//! The dataset is cut into windows of `M` observations. Each observation is
//! mapped to a latent code `h_i` by an MLP that sees it together with its `K`
//! successors, and the codes are interpolated in time with a deep kernel:
//! `[m(t), log S(t)] = k(t, t_nodes)ᵀ (K_nodes + σ_n² I)⁻¹ H`. Time
//! derivatives of the moments are carried as forward-mode tangents.

use rand::Rng;

use crate::diffengine::{time_derivative, Array, Dual, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::mgp::{Moments, S_FLOOR};
use crate::models::Mlp;

/// Window length and number of forward neighbours fed to the encoder net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    pub m: usize,
    pub k: usize,
}

/// A window of consecutive observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub index: usize,
    /// Row of the first observation in the source dataset.
    pub start: usize,
    pub times: Vec<f64>,
    pub obs: Array,
    /// Integration interval: from this window's first time to the next
    /// window's first time (the last window ends at its own last time).
    pub t_start: f64,
    pub t_end: f64,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn span(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Encoder inputs, one row per observation: `[x_i, x_{i+1}, ..., x_{i+K}]`
    /// with indices past the end of the window repeating the last row.
    pub fn encoder_input(&self, k: usize) -> Array {
        let (n, d) = self.obs.shape();
        Array::from_fn(n, (k + 1) * d, |i, c| {
            let src = (i + c / d).min(n - 1);
            self.obs[(src, c % d)]
        })
    }
}

/// Splits `(times, obs)` into consecutive windows of `plan.m` rows.
pub fn partition(times: &[f64], obs: &Array, plan: &PartitionPlan) -> Result<Vec<Partition>> {
    let n = times.len();
    if obs.rows() != n {
        return Err(Error::invalid(format!("partition: {} times but {} observation rows", n, obs.rows())));
    }
    if plan.m == 0 || plan.m > n {
        return Err(Error::invalid(format!("partition: window length {} must lie in 1..={n}", plan.m)));
    }
    if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::invalid(format!("partition: timestamps not strictly increasing at index {}", i + 1)));
    }
    let d = obs.cols();
    let mut parts = Vec::with_capacity(n.div_ceil(plan.m));
    for (index, start) in (0..n).step_by(plan.m).enumerate() {
        let end = (start + plan.m).min(n);
        let t_end = if end < n { times[end] } else { times[n - 1] };
        parts.push(Partition {
            index,
            start,
            times: times[start..end].to_vec(),
            obs: Array::from_fn(end - start, d, |i, j| obs[(start + i, j)]),
            t_start: times[start],
            t_end,
        });
    }
    Ok(parts)
}

/// Which closed form turns kernel matrices into interpolation weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InterpForm {
    /// `k(t)ᵀ (K + σ_n² I)⁻¹ H`
    #[default]
    Regularized,
    /// `k(t)ᵀ (K⁻¹ + σ_n² I)⁻¹ H`, evaluated as `k(t)ᵀ (I + σ_n² K)⁻¹ K H`.
    Literal,
}

impl std::str::FromStr for InterpForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regularized" => Ok(InterpForm::Regularized),
            "literal" => Ok(InterpForm::Literal),
            other => Err(Error::invalid(format!("unknown interpolation form '{other}'"))),
        }
    }
}

/// Squared-exponential kernel on learned features of time.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepKernel {
    pub prefix: String,
    /// Feature net `t -> DK(t)`; `None` uses `t` itself.
    pub net: Option<Mlp>,
}

impl DeepKernel {
    pub fn new(prefix: impl Into<String>, net: Option<Mlp>) -> Result<Self> {
        if let Some(n) = &net {
            if n.spec.input_width() != 1 {
                return Err(Error::invalid("deep kernel feature net must take a single time input"));
            }
        }
        Ok(DeepKernel { prefix: prefix.into(), net })
    }

    pub fn log_ell(&self) -> String {
        format!("{}.log_ell", self.prefix)
    }

    pub fn log_sigma_f(&self) -> String {
        format!("{}.log_sigma_f", self.prefix)
    }

    pub fn log_sigma_n(&self) -> String {
        format!("{}.log_sigma_n", self.prefix)
    }

    /// Initializes the feature net and the scalars to `(ell, sigma_f, sigma_n)`.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, ell: f64, sigma_f: f64, sigma_n: f64) {
        if let Some(n) = &self.net {
            n.init(store, rng);
        }
        self.set_scalars(store, ell, sigma_f, sigma_n);
    }

    pub fn set_scalars(&self, store: &mut ParamStore, ell: f64, sigma_f: f64, sigma_n: f64) {
        store.insert(&self.log_ell(), Array::scalar(ell.ln()));
        store.insert(&self.log_sigma_f(), Array::scalar(sigma_f.ln()));
        store.insert(&self.log_sigma_n(), Array::scalar(sigma_n.ln()));
    }

    fn features(&self, tape: &mut Tape, store: &ParamStore, t: Dual) -> Result<Dual> {
        match &self.net {
            Some(n) => n.forward_dual(tape, store, t),
            None => Ok(t),
        }
    }

    /// Kernel matrix between feature rows `a` (`n x p`) and constant feature
    /// rows `b` (`m x p`).
    fn gram(&self, tape: &mut Tape, store: &ParamStore, a: Dual, b: Var) -> Result<Dual> {
        let (n, p) = tape.value(a.v).shape();
        let m = tape.value(b).rows();
        let ones_m = tape.constant(Array::ones(1, m));
        let ones_n = tape.constant(Array::ones(n, 1));
        let mut acc: Option<Dual> = None;
        for c in 0..p {
            let ac = tape.d_slice_cols(a, c, c + 1)?;
            let ac = tape.d_matmul(ac, Dual::constant(ones_m))?;
            let bc = tape.slice_cols(b, c, c + 1)?;
            let bc = tape.transpose(bc)?;
            let bc = tape.matmul(ones_n, bc)?;
            let diff = tape.d_sub(ac, Dual::constant(bc))?;
            let sq = tape.d_square(diff)?;
            acc = Some(match acc {
                None => sq,
                Some(prev) => tape.d_add(prev, sq)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::invalid("deep kernel features are empty"))?;
        let log_ell = tape.param(store, &self.log_ell())?;
        let inv = tape.scale(log_ell, -2.0)?;
        let inv = tape.exp(inv)?;
        let coef = tape.scale(inv, -0.5)?;
        let arg = tape.d_scale_by(coef, acc)?;
        let k = tape.d_exp(arg)?;
        let log_sf = tape.param(store, &self.log_sigma_f())?;
        let sf = tape.exp(log_sf)?;
        tape.d_scale_by(sf, k)
    }
}

/// Latent codes of one window on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPartition {
    pub node_times: Vec<f64>,
    /// `M x 2d` codes, one row per node.
    pub h: Var,
    /// Interpolation weights `M x 2d`, filled by [`Encoder::prepare`].
    alpha: Option<Var>,
    node_features: Option<Var>,
}

impl EncodedPartition {
    /// Wraps codes computed elsewhere.
    pub fn from_codes(node_times: Vec<f64>, h: Var) -> Self {
        EncodedPartition { node_times, h, alpha: None, node_features: None }
    }
}

/// Encoder net plus deep kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub net: Mlp,
    pub kernel: DeepKernel,
    pub k: usize,
    pub latent_dim: usize,
    pub form: InterpForm,
}

impl Encoder {
    pub fn new(net: Mlp, kernel: DeepKernel, k: usize, latent_dim: usize) -> Result<Self> {
        if net.spec.output_width() != 2 * latent_dim {
            return Err(Error::invalid(format!("encoder net outputs {} values, expected {}", net.spec.output_width(), 2 * latent_dim)));
        }
        Ok(Encoder { net, kernel, k, latent_dim, form: InterpForm::Regularized })
    }

    pub fn with_form(mut self, form: InterpForm) -> Self {
        self.form = form;
        self
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, ell: f64, sigma_f: f64, sigma_n: f64) {
        self.net.init(store, rng);
        self.kernel.init(store, rng, ell, sigma_f, sigma_n);
    }

    /// Computes `h_i` for every observation of `part`.
    pub fn encode_nodes(&self, tape: &mut Tape, store: &ParamStore, part: &Partition) -> Result<EncodedPartition> {
        let x = part.encoder_input(self.k);
        if x.cols() != self.net.spec.input_width() {
            return Err(Error::invalid(format!("encoder net expects {} inputs, window gives {}", self.net.spec.input_width(), x.cols())));
        }
        let xv = tape.constant(x);
        let h = self.net.forward(tape, store, xv)?;
        let mut enc = EncodedPartition::from_codes(part.times.clone(), h);
        self.prepare(tape, store, &mut enc)?;
        Ok(enc)
    }

    /// Solves for the interpolation weights of `enc` (once per tape).
    pub fn prepare(&self, tape: &mut Tape, store: &ParamStore, enc: &mut EncodedPartition) -> Result<()> {
        if enc.alpha.is_some() {
            return Ok(());
        }
        let m = enc.node_times.len();
        if m == 0 {
            return Err(Error::invalid("cannot interpolate an empty window"));
        }
        if tape.value(enc.h).shape() != (m, 2 * self.latent_dim) {
            return Err(Error::Shape { op: "interpolate", lhs: tape.value(enc.h).shape(), rhs: (m, 2 * self.latent_dim) });
        }
        let tn = tape.constant(Array::col(&enc.node_times));
        let fnode = self.kernel.features(tape, store, Dual::constant(tn))?.v;
        let kmat = self.kernel.gram(tape, store, Dual::constant(fnode), fnode)?.v;
        let log_sn = tape.param(store, &self.kernel.log_sigma_n())?;
        let sn2 = tape.scale(log_sn, 2.0)?;
        let sn2 = tape.exp(sn2)?;
        let eye = tape.constant(Array::identity(m));
        let noise = tape.scale_by(sn2, eye)?;
        let alpha = match self.form {
            InterpForm::Regularized => {
                let reg = tape.add(kmat, noise)?;
                tape.solve(reg, enc.h)?
            }
            InterpForm::Literal => {
                let nk = tape.scale_by(sn2, kmat)?;
                let reg = tape.add(eye, nk)?;
                let kh = tape.matmul(kmat, enc.h)?;
                tape.solve(reg, kh)?
            }
        };
        enc.alpha = Some(alpha);
        enc.node_features = Some(fnode);
        Ok(())
    }

    /// Raw interpolant `[m(t), log S(t)]` (`n x 2d`) with its time tangent.
    pub fn interpolate_raw(&self, tape: &mut Tape, store: &ParamStore, enc: &mut EncodedPartition, t: &[f64]) -> Result<(Var, Var)> {
        self.prepare(tape, store, enc)?;
        let (alpha, fnode) = (enc.alpha.unwrap(), enc.node_features.unwrap());
        time_derivative(tape, t, |tape, tv| {
            let ft = self.kernel.features(tape, store, tv)?;
            let kt = self.kernel.gram(tape, store, ft, fnode)?;
            tape.d_matmul(kt, Dual::constant(alpha))
        })
    }

    /// Posterior moments at the query times `t` (one row each).
    pub fn interpolate(&self, tape: &mut Tape, store: &ParamStore, enc: &mut EncodedPartition, t: &[f64]) -> Result<Moments> {
        let (raw, draw) = self.interpolate_raw(tape, store, enc, t)?;
        let d = self.latent_dim;
        let out = Dual::new(raw, draw);
        let m = tape.d_slice_cols(out, 0, d)?;
        let log_s = tape.d_slice_cols(out, d, 2 * d)?;
        let s = tape.d_exp(log_s)?;
        let s = tape.d_clamp_min(s, S_FLOOR)?;
        let zero = |tape: &mut Tape, v: Var| {
            let (r, c) = tape.value(v).shape();
            tape.constant(Array::zeros(r, c))
        };
        let dm = match m.d {
            Some(x) => x,
            None => zero(tape, m.v),
        };
        let ds = match s.d {
            Some(x) => x,
            None => zero(tape, s.v),
        };
        Ok(Moments { m: m.v, s: s.v, dm, ds })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, MlpSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partition_examples() {
        let times: Vec<f64> = (1..=6).map(|i| i as f64).collect();
        let obs = Array::from_fn(6, 1, |i, _| i as f64);
        let p = partition(&times, &obs, &PartitionPlan { m: 2, k: 0 }).unwrap();
        let spans: Vec<(f64, f64)> = p.iter().map(|q| (q.t_start, q.t_end)).collect();
        assert_eq!(spans, vec![(1.0, 3.0), (3.0, 5.0), (5.0, 6.0)]);

        let p = partition(&times[..5], &Array::zeros(5, 1), &PartitionPlan { m: 2, k: 0 }).unwrap();
        assert_eq!(p.iter().map(|q| q.len()).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert_eq!((p[2].t_start, p[2].t_end), (5.0, 5.0));

        let p = partition(&times, &obs, &PartitionPlan { m: 6, k: 0 }).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].t_start, p[0].t_end), (1.0, 6.0));
        assert_eq!(p[0].obs, obs);
    }

    #[test]
    fn partition_rejects_bad_input() {
        let obs = Array::zeros(3, 1);
        assert!(partition(&[0.0, 2.0, 1.0], &obs, &PartitionPlan { m: 1, k: 0 }).is_err());
        assert!(partition(&[0.0, 1.0, 1.0], &obs, &PartitionPlan { m: 1, k: 0 }).is_err());
        assert!(partition(&[0.0, 1.0, 2.0], &obs, &PartitionPlan { m: 0, k: 0 }).is_err());
        assert!(partition(&[0.0, 1.0, 2.0], &obs, &PartitionPlan { m: 4, k: 0 }).is_err());
    }

    #[test]
    fn neighbour_inputs_are_clamped() {
        let part = partition(&[0.0, 1.0, 2.0], &Array::from_fn(3, 2, |i, j| (10 * i + j) as f64), &PartitionPlan { m: 3, k: 2 }).unwrap().remove(0);
        assert_eq!(part.encoder_input(0), part.obs);
        let x = part.encoder_input(2);
        assert_eq!(x.row_slice(0), &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        assert_eq!(x.row_slice(2), &[20.0, 21.0, 20.0, 21.0, 20.0, 21.0]);
    }

    fn identity_kernel_encoder(sigma_n: f64, ell: f64) -> (Encoder, ParamStore) {
        let net = Mlp::new("enc", MlpSpec::new(vec![1, 4, 2], Activation::Tanh)).unwrap();
        let kernel = DeepKernel::new("dk", None).unwrap();
        let enc = Encoder::new(net, kernel, 0, 1).unwrap();
        let mut store = ParamStore::default();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0), ell, 1.7, sigma_n);
        (enc, store)
    }

    #[test]
    fn interpolation_is_exact_at_nodes() {
        let (enc, store) = identity_kernel_encoder(1e-300, 0.7);
        let mut tape = Tape::new();
        let times = vec![0.0, 0.5, 1.2, 2.0];
        let h = Array::from_fn(4, 2, |i, j| ((i + 1) as f64 * 0.7 + j as f64).sin());
        let hv = tape.constant(h.clone());
        let mut e = EncodedPartition::from_codes(times.clone(), hv);
        let (raw, _) = enc.interpolate_raw(&mut tape, &store, &mut e, &times).unwrap();
        let out = tape.value(raw);
        for i in 0..4 {
            for j in 0..2 {
                assert!((out[(i, j)] - h[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn single_node_formula() {
        let ell = 0.3;
        let (enc, store) = identity_kernel_encoder(1e-300, ell);
        let mut tape = Tape::new();
        let hv = tape.constant(Array::row(&[0.8, -1.5]));
        let mut e = EncodedPartition::from_codes(vec![1.0], hv);
        let t = 1.2;
        let (raw, draw) = enc.interpolate_raw(&mut tape, &store, &mut e, &[t]).unwrap();
        let w = (-(t - 1.0f64).powi(2) / (2.0 * ell * ell)).exp();
        let dw = -w * (t - 1.0) / (ell * ell);
        let (out, dout) = (tape.value(raw), tape.value(draw));
        assert!((out[(0, 0)] - 0.8 * w).abs() < 1e-14 && (out[(0, 1)] + 1.5 * w).abs() < 1e-14);
        assert!((dout[(0, 0)] - 0.8 * dw).abs() < 1e-13);
    }

    #[test]
    fn equidistant_query_weights_nodes_equally() {
        let (enc, store) = identity_kernel_encoder(0.1, 0.5);
        let mut tape = Tape::new();
        let hv = tape.constant(Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let mut e = EncodedPartition::from_codes(vec![0.0, 1.0], hv);
        let (raw, _) = enc.interpolate_raw(&mut tape, &store, &mut e, &[0.5]).unwrap();
        let out = tape.value(raw);
        assert!((out[(0, 0)] - out[(0, 1)]).abs() < 1e-15);
    }

    fn deep_encoder(form: InterpForm) -> (Encoder, ParamStore, Partition) {
        let net = Mlp::new("enc", MlpSpec::new(vec![4, 6, 4], Activation::Tanh).with_residual(true)).unwrap().with_residual_width(2);
        let dk = Mlp::new("dk.net", MlpSpec::new(vec![1, 5, 2], Activation::Tanh)).unwrap();
        let enc = Encoder::new(net, DeepKernel::new("dk", Some(dk)).unwrap(), 1, 2).unwrap().with_form(form);
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        enc.init(&mut store, &mut rng, 0.6, 1.3, 0.2);
        let times = vec![0.0, 0.3, 0.55, 0.9, 1.2];
        let obs = Array::from_fn(5, 2, |i, j| (0.9 * i as f64 + 1.7 * j as f64).cos());
        let part = partition(&times, &obs, &PartitionPlan { m: 5, k: 1 }).unwrap().remove(0);
        (enc, store, part)
    }

    fn moments_at(enc: &Encoder, store: &ParamStore, part: &Partition, t: f64) -> [Array; 4] {
        let mut tape = Tape::new();
        let mut e = enc.encode_nodes(&mut tape, store, part).unwrap();
        let mo = enc.interpolate(&mut tape, store, &mut e, &[t]).unwrap();
        [mo.m, mo.s, mo.dm, mo.ds].map(|v| tape.value(v).clone())
    }

    #[test]
    fn time_derivatives_match_finite_differences() {
        for form in [InterpForm::Regularized, InterpForm::Literal] {
            let (enc, store, part) = deep_encoder(form);
            for &t in &[0.1, 0.47, 1.05] {
                let [_, _, dm, ds] = moments_at(&enc, &store, &part, t);
                let [mp, sp, _, _] = moments_at(&enc, &store, &part, t + 1e-5);
                let [mn, sn, _, _] = moments_at(&enc, &store, &part, t - 1e-5);
                for j in 0..2 {
                    let fd_m = (mp.as_slice()[j] - mn.as_slice()[j]) / 2e-5;
                    let fd_s = (sp.as_slice()[j] - sn.as_slice()[j]) / 2e-5;
                    assert!((fd_m - dm.as_slice()[j]).abs() <= 1e-4 * fd_m.abs().max(1e-3), "{form:?} dm {fd_m} {}", dm.as_slice()[j]);
                    assert!((fd_s - ds.as_slice()[j]).abs() <= 1e-4 * fd_s.abs().max(1e-3), "{form:?} ds {fd_s} {}", ds.as_slice()[j]);
                }
            }
        }
    }

    /// A scalar mixing every moment output, including the time derivatives.
    fn objective(enc: &Encoder, store: &ParamStore, part: &Partition, tape: &mut Tape) -> Var {
        let mut e = enc.encode_nodes(tape, store, part).unwrap();
        let mo = enc.interpolate(tape, store, &mut e, &[0.2, 0.7, 1.1]).unwrap();
        let mut acc = None;
        for (k, v) in [mo.m, mo.s, mo.dm, mo.ds].into_iter().enumerate() {
            let w = tape.constant(Array::from_fn(3, 2, |i, j| ((k * 6 + i * 2 + j) as f64 * 0.37).sin()));
            let p = tape.mul(v, w).unwrap();
            let s = tape.sum(p).unwrap();
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s).unwrap(),
            });
        }
        acc.unwrap()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (enc, mut store, part) = deep_encoder(InterpForm::Regularized);
        let mut tape = Tape::new();
        let out = objective(&enc, &store, &part, &mut tape);
        let grads = tape.gradients(out, 1.0).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for name in &names {
            let g = grads.get(name).expect("every parameter reaches the output").clone();
            for idx in 0..g.len() {
                let orig = store.value(name).unwrap().as_slice()[idx];
                let mut eval = |v: f64| {
                    store.value_mut(name).unwrap().as_mut_slice()[idx] = v;
                    let mut t = Tape::new();
                    let o = objective(&enc, &store, &part, &mut t);
                    t.value(o).item()
                };
                let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
                eval(orig);
                let err = (fd - g.as_slice()[idx]).abs() / fd.abs().max(1e-2);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn encoder_width_is_checked() {
        let net = Mlp::new("enc", MlpSpec::new(vec![2, 4, 3], Activation::Tanh)).unwrap();
        assert!(Encoder::new(net, DeepKernel::new("dk", None).unwrap(), 0, 2).is_err());
        let bad = Mlp::new("dk", MlpSpec::new(vec![2, 4, 1], Activation::Tanh)).unwrap();
        assert!(DeepKernel::new("dk", Some(bad)).is_err());
    }
}
