use rand::Rng as _;

use super::loss::{add_watermark_terms, ascend};
use super::{build_key, watermark_grad, watermark_loss, InjectionConfig, WatermarkKey};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::graphs::{feature_moments, Dataset, Graph};
use crate::pretrain::{init_encoder, train_encoder, EpochStats};
use crate::rng::{derive_seed, rng_from, stream, Rng};

/// Result of watermark injection.
#[derive(Debug, Clone)]
pub struct Injection {
    pub encoder: EncoderParams,
    pub key: WatermarkKey,
    pub curve: Vec<EpochStats>,
    /// `‖δ_t‖₂` of every inner step, in order.
    pub delta_norms: Vec<f64>,
    /// Watermark loss before and after training on one fixed real batch.
    pub initial_watermark_loss: f64,
    pub final_watermark_loss: f64,
}

fn sample_real<'a>(dataset: &'a Dataset, q: usize, rng: &mut Rng) -> Vec<&'a Graph> {
    (0..q)
        .map(|_| &dataset.graphs()[rng.random_range(0..dataset.len())])
        .collect()
}

/// Samples a key from the dataset's feature moments and trains a fresh
/// encoder with it.
pub fn inject(dataset: &Dataset, cfg: &InjectionConfig) -> Result<Injection> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let moments = feature_moments(dataset)?;
    let key_seed = derive_seed(cfg.pretrain.seed, stream::KEY);
    let key = build_key(cfg, &moments, Some(dataset), key_seed, &mut rng_from(key_seed))?;
    inject_with_key(dataset, cfg, key)
}

/// Trains the seeded initialization with a given key.
pub fn inject_with_key(dataset: &Dataset, cfg: &InjectionConfig, key: WatermarkKey) -> Result<Injection> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let init = init_encoder(dataset.feature_dim(), &cfg.pretrain);
    inject_from(init, dataset, cfg, key)
}

/// Continues training `params` on the pretraining objective plus the
/// watermark objective for `key`. Each step draws a fresh real batch, runs
/// the inner ascent (unless disabled), and adds the watermark gradients at
/// the perturbed points to the pretraining gradient.
pub fn inject_from(params: EncoderParams, dataset: &Dataset, cfg: &InjectionConfig, key: WatermarkKey) -> Result<Injection> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let seed = cfg.pretrain.seed;
    let margin = cfg.hinge_margin();
    let probe: Vec<&Graph> = sample_real(dataset, cfg.neg_samples, &mut rng_from(derive_seed(seed, stream::PROBE)));
    let initial_watermark_loss = watermark_loss(&params, &key, &probe, margin)?;

    let mut real_rng = rng_from(derive_seed(seed, stream::REAL_BATCH));
    let mut delta_norms = Vec::new();
    let (encoder, curve) = train_encoder(dataset, &cfg.pretrain, params, |p, grad| {
        let real = sample_real(dataset, cfg.neg_samples, &mut real_rng);
        if cfg.lambda == 0.0 || key.is_empty() {
            return watermark_loss(p, &key, &real, margin);
        }
        if cfg.skips_ascent() {
            let (lw, g) = watermark_grad(p, &key, &real, margin)?;
            add_watermark_terms(grad, &[g], cfg.lambda, cfg.inner_weighting);
            return Ok(lw);
        }
        let asc = ascend(p, &key, &real, margin, cfg.epsilon, cfg.inner_steps, true, &mut delta_norms)?;
        add_watermark_terms(grad, &asc.grads[1..], cfg.lambda, cfg.inner_weighting);
        Ok(asc.loss_at_theta)
    })?;
    let final_watermark_loss = watermark_loss(&encoder, &key, &probe, margin)?;
    Ok(Injection {
        encoder,
        key,
        curve,
        delta_norms,
        initial_watermark_loss,
        final_watermark_loss,
    })
}
