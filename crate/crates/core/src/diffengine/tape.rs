//! Wengert-list reverse-mode differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records every primitive in evaluation order, so a node's inputs
//! always precede it. [`Tape::gradients`] sweeps the list backwards once.
//! Parameters enter through [`Tape::param`], which copies the current value
//! out of a [`ParamStore`] and remembers the name so the backward sweep can
//! route gradients back to it.

use super::{Array, Gradients, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Const,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var, f64),
    /// `1 x 1` variable times an array.
    ScaleBy(Var, Var),
    /// Adds a `1 x m` row to every row of an `n x m` array.
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ClampMin(Var, f64),
    /// `A⁻¹ B` for symmetric positive definite `A`.
    Solve(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "divide",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::ScaleBy(..) => "scale_by",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::ConcatCols(_) => "concatenate_cols",
            Op::ConcatRows(_) => "concatenate_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ClampMin(..) => "clamp_min",
            Op::Solve(..) => "solve",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array,
    /// Cholesky factor for `Solve` nodes.
    aux: Option<Array>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_names: Vec<String>,
    param_vars: Vec<Var>,
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::Shape { op, lhs: a.shape(), rhs: b.shape() }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Lower Cholesky factor of `a`, or `None` if a pivot is not positive.
pub fn cholesky(a: &Array) -> Option<Array> {
    let n = a.rows();
    let mut l = Array::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            let (ri, rj) = (l.row_slice(i), l.row_slice(j));
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Cholesky with diagonal jitter: tries 0, then 1e-10, growing ×10 up to 1e-6.
pub fn cholesky_jittered(a: &Array) -> Result<Array> {
    if let Some(l) = cholesky(a) {
        return Ok(l);
    }
    let mut jitter = 1e-10;
    while jitter <= 1e-6 * (1.0 + 1e-9) {
        let mut aj = a.clone();
        for i in 0..a.rows() {
            aj[(i, i)] += jitter;
        }
        if let Some(l) = cholesky(&aj) {
            return Ok(l);
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: 1e-6 })
}

/// Solves `L Lᵀ X = B` given the lower factor `L`.
pub fn cholesky_solve(l: &Array, b: &Array) -> Array {
    let n = l.rows();
    let m = b.cols();
    let mut x = b.clone();
    // forward: L Y = B
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            if lik == 0.0 {
                continue;
            }
            for c in 0..m {
                let v = x[(k, c)];
                x[(i, c)] -= lik * v;
            }
        }
        let lii = l[(i, i)];
        for c in 0..m {
            x[(i, c)] /= lii;
        }
    }
    // backward: Lᵀ X = Y
    for i in (0..n).rev() {
        for k in i + 1..n {
            let lki = l[(k, i)];
            if lki == 0.0 {
                continue;
            }
            for c in 0..m {
                let v = x[(k, c)];
                x[(i, c)] -= lki * v;
            }
        }
        let lii = l[(i, i)];
        for c in 0..m {
            x[(i, c)] /= lii;
        }
    }
    x
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Inputs of node `v`; used to check the topological-order invariant.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Const | Op::Param(_) => vec![],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Transpose(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::SliceCols(a, ..)
            | Op::SliceRows(a, ..)
            | Op::ClampMin(a, _) => vec![*a],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::ScaleBy(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::Solve(a, b) => vec![*a, *b],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node { op: Op::Const, value, aux: None });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    /// Records the current value of parameter `name` as a differentiable leaf.
    /// Each name gets one leaf per tape; later requests reuse it.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(i) = self.param_names.iter().position(|n| n == name) {
            return Ok(self.param_vars[i]);
        }
        let value = store.value(name)?.clone();
        self.param_names.push(name.to_string());
        self.nodes.push(Node { op: Op::Param(self.param_names.len() - 1), value, aux: None });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.push(v);
        Ok(v)
    }

    fn eval(&self, op: &Op) -> Result<(Array, Option<Array>)> {
        let v = |x: &Var| &self.nodes[x.0].value;
        let name = op.name();
        let out = match op {
            Op::Const | Op::Param(_) => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (x, y) = (v(a), v(b));
                if x.shape() != y.shape() {
                    return Err(shape_err(name, x, y));
                }
                match op {
                    Op::Add(..) => x.zip_map(y, |p, q| p + q),
                    Op::Sub(..) => x.zip_map(y, |p, q| p - q),
                    Op::Mul(..) => x.zip_map(y, |p, q| p * q),
                    _ => x.zip_map(y, |p, q| p / q),
                }
            }
            Op::Neg(a) => v(a).map(|x| -x),
            Op::Scale(a, c) => v(a).scale(*c),
            Op::Offset(a, c) => v(a).map(|x| x + c),
            Op::ScaleBy(s, a) => {
                let sv = v(s);
                if !sv.is_scalar() {
                    return Err(shape_err(name, sv, v(a)));
                }
                v(a).scale(sv.item())
            }
            Op::AddRow(a, b) => {
                let (x, r) = (v(a), v(b));
                if r.rows() != 1 || r.cols() != x.cols() {
                    return Err(shape_err(name, x, r));
                }
                let mut out = x.clone();
                for i in 0..out.rows() {
                    for (o, &bb) in out.row_slice_mut(i).iter_mut().zip(r.as_slice()) {
                        *o += bb;
                    }
                }
                out
            }
            Op::MatMul(a, b) => {
                let (x, y) = (v(a), v(b));
                if x.cols() != y.rows() {
                    return Err(shape_err(name, x, y));
                }
                x.matmul(y)
            }
            Op::Transpose(a) => v(a).transpose(),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Log(a) => v(a).map(f64::ln),
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Softplus(a) => v(a).map(softplus),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Sqrt(a) => v(a).map(f64::sqrt),
            Op::Square(a) => v(a).map(|x| x * x),
            Op::Sum(a) => Array::scalar(v(a).sum()),
            Op::ConcatCols(vs) => {
                let first = v(vs.first().ok_or_else(|| Error::invalid("concatenate of nothing"))?);
                let rows = first.rows();
                let mut cols = 0;
                for x in vs {
                    if v(x).rows() != rows {
                        return Err(shape_err(name, first, v(x)));
                    }
                    cols += v(x).cols();
                }
                let mut out = Array::zeros(rows, cols);
                for i in 0..rows {
                    let mut off = 0;
                    for x in vs {
                        let src = v(x).row_slice(i);
                        out.row_slice_mut(i)[off..off + src.len()].copy_from_slice(src);
                        off += src.len();
                    }
                }
                out
            }
            Op::ConcatRows(vs) => {
                let first = v(vs.first().ok_or_else(|| Error::invalid("concatenate of nothing"))?);
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for x in vs {
                    if v(x).cols() != cols {
                        return Err(shape_err(name, first, v(x)));
                    }
                    rows += v(x).rows();
                    data.extend_from_slice(v(x).as_slice());
                }
                Array::from_vec(rows, cols, data)
            }
            Op::SliceCols(a, s, e) => {
                let x = v(a);
                if s > e || *e > x.cols() {
                    return Err(Error::Shape { op: name, lhs: x.shape(), rhs: (*s, *e) });
                }
                Array::from_fn(x.rows(), e - s, |i, j| x[(i, s + j)])
            }
            Op::SliceRows(a, s, e) => {
                let x = v(a);
                if s > e || *e > x.rows() {
                    return Err(Error::Shape { op: name, lhs: x.shape(), rhs: (*s, *e) });
                }
                Array::from_vec(e - s, x.cols(), x.as_slice()[s * x.cols()..e * x.cols()].to_vec())
            }
            Op::ClampMin(a, floor) => v(a).map(|x| if x > *floor { x } else { *floor }),
            Op::Solve(a, b) => {
                let (am, bm) = (v(a), v(b));
                if am.rows() != am.cols() || am.rows() != bm.rows() {
                    return Err(shape_err(name, am, bm));
                }
                let l = cholesky_jittered(am)?;
                let x = cholesky_solve(&l, bm);
                return Ok((x, Some(l)));
            }
        };
        Ok((out, None))
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (value, aux) = self.eval(&op)?;
        self.nodes.push(Node { op, value, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Recomputes every non-leaf value from the recorded operations.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Const | Op::Param(_)) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, aux) = self.eval(&op)?;
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
        Ok(())
    }

    /// Overwrites the value of a leaf node (constant or parameter).
    pub fn set_leaf(&mut self, v: Var, value: Array) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Const | Op::Param(_)) {
            return Err(Error::invalid("set_leaf on a non-leaf node"));
        }
        if node.value.shape() != value.shape() {
            return Err(shape_err("set_leaf", &node.value, &value));
        }
        node.value = value;
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Neg(a))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Offset(a, c))
    }
    pub fn scale_by(&mut self, s: Var, a: Var) -> Result<Var> {
        self.push(Op::ScaleBy(s, a))
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softplus(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt(a))
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }
    pub fn concat_cols(&mut self, vs: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(vs.to_vec()))
    }
    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(vs.to_vec()))
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols(a, start, end))
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceRows(a, start, end))
    }
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.push(Op::ClampMin(a, floor))
    }
    /// `A⁻¹ B` via Cholesky of the symmetric positive definite `A`.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Solve(a, b))
    }

    /// Row sums as an `n x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ones = self.constant(Array::ones(self.value(a).cols(), 1));
        self.matmul(a, ones)
    }

    /// Column sums as a `1 x m` row.
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let ones = self.constant(Array::ones(1, self.value(a).rows()));
        self.matmul(ones, a)
    }

    /// Reverse sweep from the scalar `output`, seeded with `seed`.
    pub fn gradients(&self, output: Var, seed: f64) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if out_shape != (1, 1) {
            return Err(Error::NonScalarOutput(out_shape));
        }
        let adj = self.adjoints(output, seed);
        let mut grads = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if let Op::Param(p) = node.op {
                if let Some(g) = &adj[i] {
                    let name = &self.param_names[p];
                    match grads.grads.get_mut(name) {
                        Some(acc) => acc.add_assign(g),
                        None => {
                            grads.grads.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Accumulates `d output / d param` (times `seed`) into `store`.
    pub fn backward(&self, output: Var, seed: f64, store: &mut ParamStore) -> Result<()> {
        let g = self.gradients(output, seed)?;
        store.accumulate(&g)
    }

    /// Gradient of a scalar output with respect to a leaf node.
    pub fn grad_wrt(&self, output: Var, wrt: Var) -> Result<Array> {
        if !matches!(self.nodes[wrt.0].op, Op::Const | Op::Param(_)) {
            return Err(Error::invalid("grad_wrt requires a leaf node"));
        }
        let out_shape = self.value(output).shape();
        if out_shape != (1, 1) {
            return Err(Error::NonScalarOutput(out_shape));
        }
        let adj = self.adjoints(output, 1.0);
        let (r, c) = self.value(wrt).shape();
        Ok(adj.get(wrt.0).cloned().flatten().unwrap_or_else(|| Array::zeros(r, c)))
    }

    fn adjoints(&self, output: Var, seed: f64) -> Vec<Option<Array>> {
        let mut adj: Vec<Option<Array>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Array::scalar(seed));

        fn acc(adj: &mut [Option<Array>], v: Var, g: Array) {
            match &mut adj[v.0] {
                Some(a) => a.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Const | Op::Param(_) => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.map(|x| -x));
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(b), |p, q| p * q);
                    let gb = g.zip_map(val(a), |p, q| p * q);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Div(a, b) => {
                    let ga = g.zip_map(val(b), |p, q| p / q);
                    // d(a/b)/db = -(a/b)/b
                    let gb = g.zip_map(&node.value, |p, y| -p * y).zip_map(val(b), |p, q| p / q);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Neg(a) => acc(&mut adj, *a, g.map(|x| -x)),
                Op::Scale(a, c) => acc(&mut adj, *a, g.scale(*c)),
                Op::Offset(a, _) => acc(&mut adj, *a, g),
                Op::ScaleBy(s, a) => {
                    let gs: f64 = g.as_slice().iter().zip(val(a).as_slice()).map(|(p, q)| p * q).sum();
                    let ga = g.scale(val(s).item());
                    acc(&mut adj, *s, Array::scalar(gs));
                    acc(&mut adj, *a, ga);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Array::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in gb.as_mut_slice().iter_mut().zip(g.row_slice(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut adj, *b, gb);
                    acc(&mut adj, *a, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(val(b));
                    let gb = val(a).t_matmul(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::Exp(a) => acc(&mut adj, *a, g.zip_map(&node.value, |p, y| p * y)),
                Op::Log(a) => acc(&mut adj, *a, g.zip_map(val(a), |p, x| p / x)),
                Op::Tanh(a) => acc(&mut adj, *a, g.zip_map(&node.value, |p, y| p * (1.0 - y * y))),
                Op::Relu(a) => acc(&mut adj, *a, g.zip_map(val(a), |p, x| if x > 0.0 { p } else { 0.0 })),
                Op::Softplus(a) => acc(&mut adj, *a, g.zip_map(val(a), |p, x| p * sigmoid(x))),
                Op::Sigmoid(a) => acc(&mut adj, *a, g.zip_map(&node.value, |p, y| p * y * (1.0 - y))),
                Op::Sqrt(a) => acc(&mut adj, *a, g.zip_map(&node.value, |p, y| p / (2.0 * y))),
                Op::Square(a) => acc(&mut adj, *a, g.zip_map(val(a), |p, x| 2.0 * p * x)),
                Op::Sum(a) => {
                    let (r, c) = val(a).shape();
                    acc(&mut adj, *a, Array::filled(r, c, g.item()));
                }
                Op::ConcatCols(vs) => {
                    let mut off = 0;
                    for v in vs {
                        let w = val(v).cols();
                        let part = Array::from_fn(g.rows(), w, |r, c| g[(r, off + c)]);
                        off += w;
                        acc(&mut adj, *v, part);
                    }
                }
                Op::ConcatRows(vs) => {
                    let mut off = 0;
                    let cols = g.cols();
                    for v in vs {
                        let h = val(v).rows();
                        let part =
                            Array::from_vec(h, cols, g.as_slice()[off * cols..(off + h) * cols].to_vec());
                        off += h;
                        acc(&mut adj, *v, part);
                    }
                }
                Op::SliceCols(a, s, _) => {
                    let (r, c) = val(a).shape();
                    let mut ga = Array::zeros(r, c);
                    for row in 0..r {
                        ga.row_slice_mut(row)[*s..*s + g.cols()].copy_from_slice(g.row_slice(row));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::SliceRows(a, s, _) => {
                    let (r, c) = val(a).shape();
                    let mut ga = Array::zeros(r, c);
                    ga.as_mut_slice()[s * c..s * c + g.len()].copy_from_slice(g.as_slice());
                    acc(&mut adj, *a, ga);
                }
                Op::ClampMin(a, floor) => {
                    acc(&mut adj, *a, g.zip_map(val(a), |p, x| if x > *floor { p } else { 0.0 }))
                }
                Op::Solve(a, b) => {
                    let l = node.aux.as_ref().expect("solve node keeps its factor");
                    let gb = cholesky_solve(l, &g);
                    let full = gb.matmul_t(&node.value);
                    // Only the lower triangle of `a` is read by the factorization.
                    let n = full.rows();
                    let ga = Array::from_fn(n, n, |i, j| match i.cmp(&j) {
                        std::cmp::Ordering::Greater => -(full[(i, j)] + full[(j, i)]),
                        std::cmp::Ordering::Equal => -full[(i, i)],
                        std::cmp::Ordering::Less => 0.0,
                    });
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
            }
        }
        adj
    }
}

/// Runs `graph_fn` on a fresh tape with `inputs` recorded as constants.
pub fn forward<F>(params: &ParamStore, inputs: &[Array], graph_fn: F) -> Result<(Var, Tape)>
where
    F: FnOnce(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
    let out = graph_fn(&mut tape, params, &vars)?;
    Ok((out, tape))
}
