//! Latent SDE inference with amortized Markov Gaussian process posteriors.
//!
//! The crate is organised bottom-up: [`diffengine`] provides reverse-mode
//! differentiation, the model pieces ([`models`], [`mgp`], [`encoder`]) build
//! on it, [`elbo`] assembles the training objective, [`sdesolve`] holds the
//! integrators and [`data`] the synthetic systems and file formats.

pub mod data;
pub mod diffengine;
pub mod elbo;
pub mod encoder;
pub mod error;
pub mod mgp;
pub mod models;
pub mod quadrature;
pub mod rng;
pub mod sdesolve;
pub mod toy;

pub use error::{Error, Result};
