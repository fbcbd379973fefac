use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

/// Central differences of `f` over every scalar in `store`.
fn fd_grad(store: &ParamStore, h: f64, f: impl Fn(&ParamStore) -> f64) -> Vec<f64> {
    let base = store.flat_values();
    let mut s = store.clone();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] += h;
            s.set_flat(&p).unwrap();
            let up = f(&s);
            p[i] -= 2.0 * h;
            s.set_flat(&p).unwrap();
            let dn = f(&s);
            (up - dn) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn random_array(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array {
    Array::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

fn tape_grad(store: &ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Var) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    let mut s = store.clone();
    s.zero_grads();
    tape.backward(out, 1.0, &mut s).unwrap();
    (tape.value(out).item(), s.flat_grads())
}

fn value_of(store: &ParamStore, f: &impl Fn(&mut Tape, &ParamStore) -> Var) -> f64 {
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    tape.value(out).item()
}

fn check_fd(store: &ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Var) -> f64 {
    let (_, g) = tape_grad(store, &f);
    let fd = fd_grad(store, 1e-5, |s| value_of(s, &f));
    rel_err(&g, &fd)
}

#[test]
fn square_value_and_gradient() {
    let mut p = ParamStore::new();
    p.insert("x", Array::scalar(3.0));
    let (v, g) = tape_grad(&p, |t, s| {
        let x = t.param(s, "x").unwrap();
        t.square(x).unwrap()
    });
    assert_eq!(v, 9.0);
    assert_eq!(g, vec![6.0]);
}

#[test]
fn tanh_at_zero_and_exp_gradient() {
    let mut t = Tape::new();
    let z = t.scalar(0.0);
    let y = t.tanh(z).unwrap();
    assert_eq!(t.value(y).item(), 0.0);

    let mut p = ParamStore::new();
    p.insert("x", Array::scalar(0.0));
    let (v, g) = tape_grad(&p, |t, s| {
        let x = t.param(s, "x").unwrap();
        t.exp(x).unwrap()
    });
    assert_eq!(v, 1.0);
    assert_eq!(g, vec![1.0]);
}

#[test]
fn sum_of_identity_matvec() {
    let (out, tape) = forward(&ParamStore::new(), &[Array::identity(2), Array::col(&[1.0, 2.0])], |t, _, xs| {
        let wx = t.matmul(xs[0], xs[1])?;
        t.sum(wx)
    })
    .unwrap();
    assert_eq!(tape.value(out).item(), 3.0);
}

#[test]
fn shape_mismatch_names_the_primitive() {
    let mut t = Tape::new();
    let a = t.constant(Array::ones(2, 3));
    let b = t.constant(Array::ones(2, 2));
    match t.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!((lhs, rhs), ((2, 3), (2, 2)));
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(matches!(t.add(a, b), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn backward_rejects_non_scalar_output() {
    let mut p = ParamStore::new();
    p.insert("x", Array::ones(2, 1));
    let mut t = Tape::new();
    let x = t.param(&p, "x").unwrap();
    let y = t.exp(x).unwrap();
    assert!(matches!(t.backward(y, 1.0, &mut p), Err(Error::NonScalarOutput((2, 1)))));
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = ParamStore::new();
    p.insert("a", random_array(&mut rng, 3, 4, -1.0, 1.0));
    p.insert("b", random_array(&mut rng, 3, 4, -1.0, 1.0));
    p.insert("pos", random_array(&mut rng, 3, 4, 0.5, 2.0));
    p.insert("m", random_array(&mut rng, 4, 2, -1.0, 1.0));
    p.insert("row", random_array(&mut rng, 1, 4, -1.0, 1.0));
    p.insert("s", Array::scalar(0.7));
    let spd = {
        let q = random_array(&mut rng, 3, 3, -1.0, 1.0);
        let mut a = q.matmul_t(&q);
        for i in 0..3 {
            a[(i, i)] += 3.0;
        }
        a
    };
    p.insert("spd", spd);

    type Build = Box<dyn Fn(&mut Tape, &ParamStore) -> Var>;
    let cases: Vec<(&str, Build)> = vec![
        ("add", Box::new(|t, s| { let (a, b) = (t.param(s, "a").unwrap(), t.param(s, "b").unwrap()); let y = t.add(a, b).unwrap(); weigh(t, y) })),
        ("sub", Box::new(|t, s| { let (a, b) = (t.param(s, "a").unwrap(), t.param(s, "b").unwrap()); let y = t.sub(a, b).unwrap(); weigh(t, y) })),
        ("mul", Box::new(|t, s| { let (a, b) = (t.param(s, "a").unwrap(), t.param(s, "b").unwrap()); let y = t.mul(a, b).unwrap(); weigh(t, y) })),
        ("divide", Box::new(|t, s| { let (a, b) = (t.param(s, "a").unwrap(), t.param(s, "pos").unwrap()); let y = t.div(a, b).unwrap(); weigh(t, y) })),
        ("matmul", Box::new(|t, s| { let (a, m) = (t.param(s, "a").unwrap(), t.param(s, "m").unwrap()); let y = t.matmul(a, m).unwrap(); weigh(t, y) })),
        ("transpose", Box::new(|t, s| { let a = t.param(s, "a").unwrap(); let y = t.transpose(a).unwrap(); weigh(t, y) })),
        ("exp", Box::new(|t, s| { let a = t.param(s, "a").unwrap(); let y = t.exp(a).unwrap(); weigh(t, y) })),
        ("log", Box::new(|t, s| { let a = t.param(s, "pos").unwrap(); let y = t.log(a).unwrap(); weigh(t, y) })),
        ("tanh", Box::new(|t, s| { let a = t.param(s, "a").unwrap(); let y = t.tanh(a).unwrap(); weigh(t, y) })),
        ("relu", Box::new(|t, s| { let a = t.param(s, "a").unwrap(); let y = t.relu(a).unwrap(); weigh(t, y) })),
        ("softplus", Box::new(|t, s| { let a = t.param(s, "a").unwrap(); let y = t.softplus(a).unwrap(); weigh(t, y) })),
        ("sigmoid", Box::new(|t, s| { let a = t.param(s, "a").unwrap(); let y = t.sigmoid(a).unwrap(); weigh(t, y) })),
        ("sqrt", Box::new(|t, s| { let a = t.param(s, "pos").unwrap(); let y = t.sqrt(a).unwrap(); weigh(t, y) })),
        ("square", Box::new(|t, s| { let a = t.param(s, "a").unwrap(); let y = t.square(a).unwrap(); weigh(t, y) })),
        ("sum", Box::new(|t, s| { let a = t.param(s, "a").unwrap(); let y = t.sum(a).unwrap(); t.square(y).unwrap() })),
        ("neg_scale_offset", Box::new(|t, s| { let a = t.param(s, "a").unwrap(); let y = t.neg(a).unwrap(); let y = t.scale(y, 1.7).unwrap(); let y = t.offset(y, 0.3).unwrap(); let y = t.square(y).unwrap(); weigh(t, y) })),
        ("scale_by", Box::new(|t, s| { let (k, a) = (t.param(s, "s").unwrap(), t.param(s, "a").unwrap()); let y = t.scale_by(k, a).unwrap(); weigh(t, y) })),
        ("add_row", Box::new(|t, s| { let (a, r) = (t.param(s, "a").unwrap(), t.param(s, "row").unwrap()); let y = t.add_row(a, r).unwrap(); let y = t.square(y).unwrap(); weigh(t, y) })),
        ("concatenate", Box::new(|t, s| { let (a, b) = (t.param(s, "a").unwrap(), t.param(s, "pos").unwrap()); let y = t.concat_cols(&[a, b]).unwrap(); let y = t.square(y).unwrap(); let z = t.concat_rows(&[a, y]).unwrap_or(y); weigh(t, z) })),
        ("slice", Box::new(|t, s| { let a = t.param(s, "a").unwrap(); let y = t.slice_cols(a, 1, 3).unwrap(); let z = t.slice_rows(a, 1, 2).unwrap(); let y = t.square(y).unwrap(); let q = t.sum(y).unwrap(); let z = t.sum(z).unwrap(); let w = t.mul(q, z).unwrap(); t.add(w, q).unwrap() })),
        ("clamp_min", Box::new(|t, s| { let a = t.param(s, "a").unwrap(); let y = t.clamp_min(a, 0.05).unwrap(); weigh(t, y) })),
        ("solve", Box::new(|t, s| { let (a, m) = (t.param(s, "spd").unwrap(), t.param(s, "a").unwrap()); let y = t.solve(a, m).unwrap(); weigh(t, y) })),
    ];
    for (name, f) in &cases {
        let err = check_fd(&p, f);
        assert!(err < 1e-6, "{name}: relative error {err:e}");
    }
}

/// Reduces `v` to a scalar through a fixed non-uniform weighting so that
/// every output entry contributes.
fn weigh(t: &mut Tape, v: Var) -> Var {
    let (r, c) = t.value(v).shape();
    let w = t.constant(Array::from_fn(r, c, |i, j| (1.3 * i as f64 + 0.7 * j as f64).sin() + 0.2));
    let y = t.mul(v, w).unwrap();
    t.sum(y).unwrap()
}

fn mlp_loss(t: &mut Tape, s: &ParamStore, x: &Array) -> Var {
    let mut h = t.constant(x.clone());
    for layer in 0..3 {
        let w = t.param(s, &format!("w{layer}")).unwrap();
        let b = t.param(s, &format!("b{layer}")).unwrap();
        h = t.matmul(h, w).unwrap();
        h = t.add_row(h, b).unwrap();
        if layer < 2 {
            h = t.tanh(h).unwrap();
        }
    }
    let sq = t.square(h).unwrap();
    t.sum(sq).unwrap()
}

fn random_mlp(seed: u64) -> (ParamStore, Array) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [3, 8, 6, 2];
    let mut p = ParamStore::new();
    for l in 0..3 {
        p.insert(format!("w{l}"), random_array(&mut rng, widths[l], widths[l + 1], -0.8, 0.8));
        p.insert(format!("b{l}"), random_array(&mut rng, 1, widths[l + 1], -0.3, 0.3));
    }
    let x = random_array(&mut rng, 5, 3, -1.0, 1.0);
    (p, x)
}

#[test]
fn three_layer_mlp_gradient_matches_finite_differences() {
    let (p, x) = random_mlp(11);
    let err = check_fd(&p, |t, s| mlp_loss(t, s, &x));
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn backward_accumulates_linearly() {
    let (mut p, x) = random_mlp(3);
    let mut t = Tape::new();
    let out = mlp_loss(&mut t, &p, &x);
    p.zero_grads();
    t.backward(out, 1.0, &mut p).unwrap();
    let once = p.flat_grads();
    t.backward(out, 1.0, &mut p).unwrap();
    let twice = p.flat_grads();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
    p.zero_grads();
    assert!(p.flat_grads().iter().all(|&g| g == 0.0));
}

#[test]
fn tape_is_topologically_ordered_and_replays_bit_identically() {
    let (p, x) = random_mlp(5);
    let mut t = Tape::new();
    let out = mlp_loss(&mut t, &p, &x);
    for i in 0..t.len() {
        for inp in t.inputs(Var(i)) {
            assert!(inp.index() < i);
        }
    }
    let before: Vec<u64> = (0..t.len()).flat_map(|i| t.value(Var(i)).as_slice().to_vec()).map(f64::to_bits).collect();
    t.replay().unwrap();
    let after: Vec<u64> = (0..t.len()).flat_map(|i| t.value(Var(i)).as_slice().to_vec()).map(f64::to_bits).collect();
    assert_eq!(before, after);
    assert!(t.value(out).item() > 0.0);
}

#[test]
fn time_derivative_of_polynomial_and_constant() {
    let mut tape = Tape::new();
    let (v, d) = time_derivative(&mut tape, &[2.0], |t, x| t.d_square(x)).unwrap();
    assert_eq!(tape.value(v).item(), 4.0);
    assert_eq!(tape.value(d).item(), 4.0);

    let mut tape = Tape::new();
    let c = tape.constant(Array::scalar(3.5));
    let (v, d) = time_derivative(&mut tape, &[0.7], |_, _| Ok(Dual::constant(c))).unwrap();
    assert_eq!(tape.value(v).item(), 3.5);
    assert_eq!(tape.value(d).item(), 0.0);
}

#[test]
fn time_derivative_is_differentiable_with_respect_to_parameters() {
    // m(t) = sum(tanh(t * w)), dm/dt = sum(w * (1 - tanh²(t w))).
    let mut p = ParamStore::new();
    p.insert("w", Array::row(&[0.4, -1.3, 0.9]));
    let t0 = 0.8;
    let build = |tape: &mut Tape, s: &ParamStore| {
        let w = tape.param(s, "w").unwrap();
        let (_, dm) = time_derivative(tape, &[t0], |tp, t| {
            let tw = tp.d_matmul(t, Dual::constant(w))?;
            let h = tp.d_tanh(tw)?;
            tp.d_row_sum(h)
        })
        .unwrap();
        // loss depends on the time derivative only
        let sq = tape.square(dm).unwrap();
        tape.sum(sq).unwrap()
    };
    let (v, g) = tape_grad(&p, build);
    let w = [0.4f64, -1.3, 0.9];
    let dm: f64 = w.iter().map(|wi| wi * (1.0 - (t0 * wi).tanh().powi(2))).sum();
    assert!((v - dm * dm).abs() < 1e-14);
    let fd = fd_grad(&p, 1e-5, |s| value_of(s, &build));
    assert!(rel_err(&g, &fd) < 1e-6);
}

#[test]
fn batched_time_derivatives_match_finite_differences() {
    let (p, _) = random_mlp(9);
    let times = [0.1, 0.45, -0.3];
    let f = |tape: &mut Tape, s: &ParamStore, t: Dual| -> crate::error::Result<Dual> {
        let w0 = tape.param(s, "w0")?;
        let first = tape.slice_rows(w0, 0, 1)?;
        let mut h = tape.d_matmul(t, Dual::constant(first))?;
        let b0 = tape.param(s, "b0")?;
        h = tape.d_add_row(h, b0)?;
        h = tape.d_softplus(h)?;
        let w1 = tape.param(s, "w1")?;
        h = tape.d_matmul(h, Dual::constant(w1))?;
        h = tape.d_relu(h)?;
        tape.d_exp(h)
    };
    let mut tape = Tape::new();
    let (_, d) = time_derivative(&mut tape, &times, |tp, t| f(tp, &p, t)).unwrap();
    let d = tape.value(d).clone();
    let eval = |ts: &[f64]| {
        let mut tape = Tape::new();
        let tv = tape.constant(Array::col(ts));
        let out = f(&mut tape, &p, Dual::constant(tv)).unwrap();
        tape.value(out.v).clone()
    };
    let h = 1e-6;
    let up = eval(&times.map(|t| t + h));
    let dn = eval(&times.map(|t| t - h));
    let fd = up.zip_map(&dn, |a, b| (a - b) / (2.0 * h));
    assert!(rel_err(d.as_slice(), fd.as_slice()) < 1e-6);
}
