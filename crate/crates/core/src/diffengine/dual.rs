//! Forward-mode tangents recorded on the tape.
//!
//! A [`Dual`] pairs a value node with an optional tangent node, the
//! directional derivative along a single scalar input (time). Tangents are
//! built from ordinary tape primitives, so anything computed from them (for
//! example `dm/dt` inside a loss) remains differentiable by the reverse sweep.
//! A missing tangent means "constant with respect to the input".

use super::{Array, Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dual {
    pub v: Var,
    pub d: Option<Var>,
}

impl Dual {
    pub fn constant(v: Var) -> Self {
        Dual { v, d: None }
    }

    pub fn new(v: Var, d: Var) -> Self {
        Dual { v, d: Some(d) }
    }
}

impl Tape {
    fn opt_add(&mut self, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
        Ok(match (a, b) {
            (Some(x), Some(y)) => Some(self.add(x, y)?),
            (Some(x), None) | (None, Some(x)) => Some(x),
            (None, None) => None,
        })
    }

    pub fn d_add(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let v = self.add(a.v, b.v)?;
        let d = self.opt_add(a.d, b.d)?;
        Ok(Dual { v, d })
    }

    pub fn d_sub(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let v = self.sub(a.v, b.v)?;
        let nb = match b.d {
            Some(x) => Some(self.neg(x)?),
            None => None,
        };
        let d = self.opt_add(a.d, nb)?;
        Ok(Dual { v, d })
    }

    pub fn d_mul(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let v = self.mul(a.v, b.v)?;
        let da = match a.d {
            Some(x) => Some(self.mul(x, b.v)?),
            None => None,
        };
        let db = match b.d {
            Some(x) => Some(self.mul(a.v, x)?),
            None => None,
        };
        let d = self.opt_add(da, db)?;
        Ok(Dual { v, d })
    }

    pub fn d_matmul(&mut self, a: Dual, b: Dual) -> Result<Dual> {
        let v = self.matmul(a.v, b.v)?;
        let da = match a.d {
            Some(x) => Some(self.matmul(x, b.v)?),
            None => None,
        };
        let db = match b.d {
            Some(x) => Some(self.matmul(a.v, x)?),
            None => None,
        };
        let d = self.opt_add(da, db)?;
        Ok(Dual { v, d })
    }

    pub fn d_transpose(&mut self, a: Dual) -> Result<Dual> {
        let v = self.transpose(a.v)?;
        let d = match a.d {
            Some(x) => Some(self.transpose(x)?),
            None => None,
        };
        Ok(Dual { v, d })
    }

    pub fn d_scale(&mut self, a: Dual, c: f64) -> Result<Dual> {
        let v = self.scale(a.v, c)?;
        let d = match a.d {
            Some(x) => Some(self.scale(x, c)?),
            None => None,
        };
        Ok(Dual { v, d })
    }

    /// `s * a` where `s` is a `1 x 1` node assumed constant in the input.
    pub fn d_scale_by(&mut self, s: Var, a: Dual) -> Result<Dual> {
        let v = self.scale_by(s, a.v)?;
        let d = match a.d {
            Some(x) => Some(self.scale_by(s, x)?),
            None => None,
        };
        Ok(Dual { v, d })
    }

    /// Row-wise bias add; the bias is constant in the input.
    pub fn d_add_row(&mut self, a: Dual, row: Var) -> Result<Dual> {
        let v = self.add_row(a.v, row)?;
        Ok(Dual { v, d: a.d })
    }

    pub fn d_exp(&mut self, a: Dual) -> Result<Dual> {
        let v = self.exp(a.v)?;
        let d = match a.d {
            Some(x) => Some(self.mul(v, x)?),
            None => None,
        };
        Ok(Dual { v, d })
    }

    pub fn d_tanh(&mut self, a: Dual) -> Result<Dual> {
        let v = self.tanh(a.v)?;
        let d = match a.d {
            Some(x) => {
                let sq = self.square(v)?;
                let one_minus = self.neg(sq)?;
                let one_minus = self.offset(one_minus, 1.0)?;
                Some(self.mul(one_minus, x)?)
            }
            None => None,
        };
        Ok(Dual { v, d })
    }

    pub fn d_relu(&mut self, a: Dual) -> Result<Dual> {
        let v = self.relu(a.v)?;
        let d = match a.d {
            Some(x) => {
                // The step function is locally constant.
                let mask = self.value(a.v).map(|z| if z > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                Some(self.mul(mask, x)?)
            }
            None => None,
        };
        Ok(Dual { v, d })
    }

    pub fn d_softplus(&mut self, a: Dual) -> Result<Dual> {
        let v = self.softplus(a.v)?;
        let d = match a.d {
            Some(x) => {
                let s = self.sigmoid(a.v)?;
                Some(self.mul(s, x)?)
            }
            None => None,
        };
        Ok(Dual { v, d })
    }

    pub fn d_square(&mut self, a: Dual) -> Result<Dual> {
        let v = self.square(a.v)?;
        let d = match a.d {
            Some(x) => {
                let p = self.mul(a.v, x)?;
                Some(self.scale(p, 2.0)?)
            }
            None => None,
        };
        Ok(Dual { v, d })
    }

    pub fn d_row_sum(&mut self, a: Dual) -> Result<Dual> {
        let v = self.row_sum(a.v)?;
        let d = match a.d {
            Some(x) => Some(self.row_sum(x)?),
            None => None,
        };
        Ok(Dual { v, d })
    }

    pub fn d_slice_cols(&mut self, a: Dual, start: usize, end: usize) -> Result<Dual> {
        let v = self.slice_cols(a.v, start, end)?;
        let d = match a.d {
            Some(x) => Some(self.slice_cols(x, start, end)?),
            None => None,
        };
        Ok(Dual { v, d })
    }

    /// Floors values at `floor`; the tangent is zeroed where the floor is active.
    pub fn d_clamp_min(&mut self, a: Dual, floor: f64) -> Result<Dual> {
        let v = self.clamp_min(a.v, floor)?;
        let d = match a.d {
            Some(x) => {
                let mask = self.value(a.v).map(|z| if z > floor { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                Some(self.mul(mask, x)?)
            }
            None => None,
        };
        Ok(Dual { v, d })
    }
}

/// Evaluates `f` at the times in `t` (one per row) and returns the value and
/// its derivative with respect to time.
///
/// `t` is recorded as a constant leaf with a unit tangent. `f` must act
/// row-wise (row `i` of the output depends only on `t[i]`), which holds for
/// everything built from MLPs and kernel rows.
pub fn time_derivative<F>(tape: &mut Tape, t: &[f64], f: F) -> Result<(Var, Var)>
where
    F: FnOnce(&mut Tape, Dual) -> Result<Dual>,
{
    let tv = tape.constant(Array::col(t));
    let one = tape.constant(Array::ones(t.len(), 1));
    let out = f(tape, Dual::new(tv, one))?;
    let d = match out.d {
        Some(d) => d,
        None => {
            let (r, c) = tape.value(out.v).shape();
            tape.constant(Array::zeros(r, c))
        }
    };
    Ok((out.v, d))
}
