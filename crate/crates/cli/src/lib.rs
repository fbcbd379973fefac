//! Training loop, experiments, evaluation and plotting for latent SDE models.

pub mod adam;
pub mod commands;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod train;

pub use error::{CliError, Result};
