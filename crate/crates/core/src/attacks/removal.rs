use crate::encoder::{EncoderParams, ParamSet};
use crate::error::{invalid, Result};
use crate::graphs::Dataset;
use crate::watermark::{inject_from, InjectionConfig, InjectionMode, WatermarkKey};

/// Global magnitude pruning: zeroes the `⌊rate·n⌋` weight-matrix entries of
/// smallest magnitude across all layers, ties broken by flat index. Biases
/// and GIN self weights are never pruned.
pub fn prune(params: &EncoderParams, rate: f64) -> Result<EncoderParams> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid(format!("pruning rate {rate} outside [0, 1]")));
    }
    let mut flat = params.flatten();
    prune_flat(&mut flat, &params.weight_mask(), rate);
    let mut out = params.clone();
    out.assign_flat(&flat);
    Ok(out)
}

/// Number of entries [`prune`] zeroes at `rate` over `n` prunable weights.
pub fn pruned_count(n: usize, rate: f64) -> usize {
    ((rate * n as f64).floor() as usize).min(n)
}

pub(crate) fn prune_flat(flat: &mut [f64], mask: &[bool], rate: f64) {
    let mut idx: Vec<usize> = (0..flat.len()).filter(|&i| mask[i]).collect();
    let k = pruned_count(idx.len(), rate);
    idx.sort_by(|&a, &b| flat[a].abs().total_cmp(&flat[b].abs()).then(a.cmp(&b)));
    for &i in &idx[..k] {
        flat[i] = 0.0;
    }
}

/// Adversarial re-watermarking: continues training `params` on the
/// pretraining objective plus the adversary's own key, without inner ascent.
pub fn overwrite(params: &EncoderParams, adversary_key: WatermarkKey, data: &Dataset, cfg: &InjectionConfig) -> Result<EncoderParams> {
    let cfg = InjectionConfig {
        mode: InjectionMode::Plain,
        ..cfg.clone()
    };
    Ok(inject_from(params.clone(), data, &cfg, adversary_key)?.encoder)
}
