//! Solver-based machinery: Euler–Maruyama sampling, adaptive Dormand–Prince
//! with evaluation counting, continuous adjoints and backprop-through-solver.

pub mod adjoint;
pub mod em;
pub mod node;
pub mod rk45;

pub use adjoint::{adjoint_grad, trajectory_loss, AdjointField, AdjointResult, LorenzField, TapeField};
pub use em::{euler_maruyama, euler_maruyama_with, uniform_grid, Dispersion};
pub use node::{node_train_step, solve_on_tape, Window};
pub use rk45::{rk45_solve, Rk45Config, Rk45Solution};

/// Number of vector-field (drift) evaluations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NfeCounter {
    count: u64,
}

impl NfeCounter {
    pub fn tick(&mut self) {
        self.count += 1;
    }

    pub fn add(&mut self, n: u64) {
        self.count += n;
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}
