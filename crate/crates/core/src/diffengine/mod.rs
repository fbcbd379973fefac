//! Reverse-mode automatic differentiation over dense `f64` arrays, with
//! forward-mode time tangents recorded on the same tape.

mod array;
pub mod checkpoint;
mod dual;
mod params;
mod tape;

pub use array::Array;
pub use dual::{time_derivative, Dual};
pub use params::{Gradients, ParamEntry, ParamStore};
pub use tape::{cholesky, cholesky_jittered, cholesky_solve, forward, Tape, Var};

#[cfg(test)]
mod tests;
