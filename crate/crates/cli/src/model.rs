//! Architectures and initial parameters for each experiment system.

use latsde_core::data::{gen_lorenz, gen_lotka_volterra, gen_predprey4, load_dataset, LorenzConfig, LvConfig, PredPrey4Config, TimeSeriesDataset};
use latsde_core::diffengine::{Array, ParamStore};
use latsde_core::elbo::{LatentSdeModel, LogNormalPosterior};
use latsde_core::encoder::{DeepKernel, Encoder};
use latsde_core::models::{Activation, DriftKind, DriftModel, GaussianLikelihood, Mlp, MlpSpec};
use latsde_core::rng::{KeyedRng, Purpose};
use rand_distr::{Distribution, Normal};

use crate::config::{System, TrainConfig};
use crate::error::{CliError, Result};

pub const LORENZ_TRUE: [f64; 3] = [10.0, 8.0 / 3.0, 28.0];

pub fn build_drift(cfg: &TrainConfig, dim: usize) -> Result<DriftModel> {
    Ok(match cfg.system {
        System::LotkaVolterra => DriftModel::mlp("drift", dim, &[64, 64, 64], Activation::Relu)?,
        System::Lorenz => DriftModel::lorenz("lz.theta"),
        System::PredPrey4 | System::Generic => DriftModel::mlp("drift", dim, &[64, 64], Activation::Relu)?,
    })
}

pub fn build_model(cfg: &TrainConfig, dim: usize) -> Result<LatentSdeModel> {
    let (enc_hidden, dk_spec) = match cfg.system {
        System::Lorenz => (vec![32, 32], MlpSpec::new(vec![1, 32, 1], Activation::Tanh)),
        _ => (vec![32, 32], MlpSpec::new(vec![1, 32, 32, 1], Activation::Relu)),
    };
    let mut widths = vec![dim * (cfg.k + 1)];
    widths.extend(enc_hidden);
    widths.push(2 * dim);
    let net = Mlp::new("enc", MlpSpec::new(widths, Activation::Relu).with_residual(true))?.with_residual_width(dim);
    let kernel = DeepKernel::new("dk", Some(Mlp::new("dk.net", dk_spec)?))?;
    let encoder = Encoder::new(net, kernel, cfg.k, dim)?.with_form(cfg.interp);
    let model = LatentSdeModel {
        encoder,
        drift: build_drift(cfg, dim)?,
        likelihood: GaussianLikelihood::identity(dim, cfg.likelihood_sd)?,
        diffusion: LogNormalPosterior::new("diffusion", vec![cfg.prior_mu; dim], vec![cfg.prior_sigma; dim])?,
    };
    model.validate()?;
    Ok(model)
}

/// Draws the initial drift parameters. The Lorenz parameters start from
/// `N(theta*, (0.2 theta*)^2)`.
pub fn init_drift(cfg: &TrainConfig, drift: &DriftModel, store: &mut ParamStore) -> Result<()> {
    let keys = KeyedRng::new(cfg.seed);
    drift.init(store, &mut keys.stream(Purpose::Init, 0, 2));
    if let DriftKind::Lorenz { param } = &drift.kind {
        let mut rng = keys.stream(Purpose::Init, 0, 3);
        let theta: Vec<f64> = LORENZ_TRUE.iter().map(|&t| Normal::new(t, 0.2 * t).unwrap().sample(&mut rng)).collect();
        store.insert(param.clone(), Array::row(&theta));
    }
    Ok(())
}

pub fn init_params(cfg: &TrainConfig, model: &LatentSdeModel) -> Result<ParamStore> {
    let keys = KeyedRng::new(cfg.seed);
    let mut store = ParamStore::new();
    model.encoder.init(&mut store, &mut keys.stream(Purpose::Init, 0, 1), cfg.kernel_ell, cfg.kernel_sigma_f, cfg.kernel_sigma_n);
    init_drift(cfg, &model.drift, &mut store)?;
    model.diffusion.init(&mut store, cfg.post_mu, cfg.post_sigma);
    Ok(store)
}

/// Training and validation data for a configuration.
pub fn load_data(cfg: &TrainConfig) -> Result<(TimeSeriesDataset, Option<TimeSeriesDataset>)> {
    let (train, val) = match &cfg.data {
        Some(stem) => {
            let (full, meta) = load_dataset(stem)?;
            let split = cfg.t_train.or((meta.t_train > 0.0).then_some(meta.t_train));
            match split {
                Some(t) => {
                    let (a, b) = full.split_at_time(t);
                    (a, Some(b))
                }
                None => (full, None),
            }
        }
        None => {
            let g = match cfg.system {
                System::LotkaVolterra => gen_lotka_volterra(&LvConfig { rate_hz: cfg.rate_hz, ..LvConfig::default() }, cfg.data_seed)?,
                System::Lorenz => gen_lorenz(&LorenzConfig { t_end: cfg.horizon, rate_hz: cfg.rate_hz, ..LorenzConfig::default() }, cfg.data_seed)?,
                System::PredPrey4 => gen_predprey4(&PredPrey4Config::default(), cfg.data_seed)?,
                System::Generic => return Err(CliError::usage("system 'generic' needs a data path")),
            };
            (g.train, Some(g.val))
        }
    };
    if train.len() < 2 {
        return Err(CliError::usage("training data needs at least two rows"));
    }
    let val = val.filter(|v| !v.is_empty()).map(|v| {
        if cfg.val_horizon > 0.0 {
            let end = train.times[train.len() - 1] + cfg.val_horizon;
            v.split_at_time(end).0
        } else {
            v
        }
    });
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architectures_have_the_expected_sizes() {
        let cfg = TrainConfig::preset(System::LotkaVolterra);
        let model = build_model(&cfg, 2).unwrap();
        assert_eq!(model.encoder.net.spec.widths, vec![2, 32, 32, 4]);
        let store = init_params(&cfg, &model).unwrap();
        assert_eq!(store.value("drift.w3").unwrap().shape(), (64, 2));
        assert_eq!(store.value("diffusion.mu").unwrap().shape(), (1, 2));
    }

    #[test]
    fn lorenz_start_is_a_seeded_perturbation() {
        let mut cfg = TrainConfig::preset(System::Lorenz);
        let model = build_model(&cfg, 3).unwrap();
        let a = init_params(&cfg, &model).unwrap().value("lz.theta").unwrap().clone();
        cfg.seed = 1;
        let b = init_params(&cfg, &model).unwrap().value("lz.theta").unwrap().clone();
        assert_ne!(a, b);
        assert!(a.as_slice().iter().zip(LORENZ_TRUE).all(|(x, t)| (x - t).abs() < t));
    }

    #[test]
    fn validation_horizon_trims_rows() {
        let cfg = TrainConfig { val_horizon: 1.0, ..TrainConfig::preset(System::LotkaVolterra) };
        let (train, val) = load_data(&cfg).unwrap();
        let val = val.unwrap();
        assert_eq!(train.len(), 2501);
        assert_eq!(val.len(), 50);
    }
}
