//! Self-supervised pretraining objectives and the plain training loop.

use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{BoundParams, EncoderParams, EncoderVars, GraphBatch, ParamSet};
use crate::error::{invalid, Error, Result};
use crate::graphs::{augment, AugmentKind, Dataset, Graph};
use crate::optim::Adam;
use crate::rng::{derive_seed, rng_from, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Contrastive,
    EdgePred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub neg_ratio: f64,
    /// Drop / perturb ratio of the two contrastive views.
    pub aug_ratio: f64,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Contrastive,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            temperature: 0.5,
            neg_ratio: 1.0,
            aug_ratio: 0.2,
            hidden_dim: 64,
            num_layers: 2,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Error::Config {
            field: field.to_string(),
            msg: msg.to_string(),
        };
        if self.objective == Objective::Contrastive && self.batch_size < 2 {
            return Err(bad("batch_size", "contrastive pretraining needs at least 2 graphs per batch"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(bad("temperature", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(bad("learning_rate", "must be positive"));
        }
        if !(self.neg_ratio >= 0.0) {
            return Err(bad("neg_ratio", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.aug_ratio) {
            return Err(bad("aug_ratio", "must lie in [0, 1)"));
        }
        if self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(bad("hidden_dim", "encoder needs positive width and depth"));
        }
        Ok(())
    }
}

/// InfoNCE on a tape: cosine similarities scaled by `1/tau`, row `i` of
/// `z1` against all rows of `z2`, with the diagonal as positives.
pub fn info_nce(tape: &mut Tape, z1: Var, z2: Var, tau: f64) -> Result<Var> {
    let (s1, s2) = (tape.value(z1).shape().to_vec(), tape.value(z2).shape().to_vec());
    if s1 != s2 || s1.len() != 2 {
        return Err(Error::Shape {
            op: "info_nce",
            lhs: s1,
            rhs: s2,
        });
    }
    if s1[0] < 2 {
        return Err(invalid("InfoNCE needs a batch of at least 2"));
    }
    if !(tau > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let n1 = tape.normalize_rows(z1);
    let n2 = tape.normalize_rows(z2);
    let n2t = tape.transpose(n2);
    let sim = tape.matmul(n1, n2t)?;
    let logits = tape.scale(sim, 1.0 / tau);
    tape.softmax_xent(logits, Arc::new((0..s1[0]).collect()))
}

/// Value of [`info_nce`] for two `[B, d]` embedding batches. Zero-norm rows
/// have cosine similarity 0 with everything.
pub fn info_nce_loss(z1: &Tensor, z2: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(z1.clone());
    let b = tape.constant(z2.clone());
    let l = info_nce(&mut tape, a, b, tau)?;
    Ok(tape.value(l).item())
}

/// Positive (existing) and sampled negative (absent) node pairs with their
/// labels: all edges, then `⌈neg_ratio·|E|⌉` absent pairs drawn without
/// replacement (fewer if the graph does not have that many).
pub fn edge_pred_pairs(g: &Graph, neg_ratio: f64, rng: &mut Rng) -> (Vec<(usize, usize)>, Vec<f64>) {
    let mut pairs: Vec<(usize, usize)> = g.edges().to_vec();
    let mut labels = vec![1.0; pairs.len()];
    let wanted = (neg_ratio * g.num_edges() as f64).ceil() as usize;
    if wanted > 0 {
        let absent = g.absent_pairs();
        let k = wanted.min(absent.len());
        let mut picked = index::sample(rng, absent.len(), k).into_vec();
        picked.sort_unstable();
        pairs.extend(picked.into_iter().map(|i| absent[i]));
        labels.resize(pairs.len(), 0.0);
    }
    (pairs, labels)
}

/// Mean edge-prediction BCE for one graph, scoring pairs by the inner
/// product of final node states.
pub fn edge_pred_loss(g: &Graph, params: &EncoderParams, neg_ratio: f64, rng: &mut Rng) -> Result<f64> {
    if g.num_edges() == 0 {
        return Err(invalid(format!("graph `{}` has no edges to predict", g.id())));
    }
    if g.absent_pairs().is_empty() {
        warn!(graph = g.id(), "complete graph: edge prediction uses positives only");
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let loss = edge_pred_objective(&mut tape, &vars, &[g], neg_ratio, rng)?;
    Ok(tape.value(loss).item())
}

fn edge_pred_objective(
    tape: &mut Tape,
    vars: &EncoderVars,
    graphs: &[&Graph],
    neg_ratio: f64,
    rng: &mut Rng,
) -> Result<Var> {
    let batch = GraphBatch::new(graphs.iter().copied())?;
    let h = vars.node_states(tape, &batch)?;
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for (g, &off) in graphs.iter().zip(batch.node_offsets()) {
        let (p, l) = edge_pred_pairs(g, neg_ratio, rng);
        pairs.extend(p.into_iter().map(|(u, v)| (u + off, v + off)));
        labels.extend(l);
    }
    let scores = tape.row_dot(h, Arc::new(pairs))?;
    tape.bce_logits(scores, Arc::new(labels))
}

fn contrastive_objective(
    tape: &mut Tape,
    vars: &EncoderVars,
    graphs: &[&Graph],
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<Var> {
    let view = |g: &Graph, kind, rng: &mut Rng| -> Result<Graph> {
        if g.num_nodes() < 2 {
            Ok(g.clone())
        } else {
            augment(g, kind, cfg.aug_ratio, rng)
        }
    };
    let mut v1 = Vec::with_capacity(graphs.len());
    let mut v2 = Vec::with_capacity(graphs.len());
    for g in graphs {
        v1.push(view(g, AugmentKind::NodeDrop, rng)?);
        v2.push(view(g, AugmentKind::EdgePerturb, rng)?);
    }
    let z1 = vars.embed(tape, &GraphBatch::new(&v1)?)?;
    let z2 = vars.embed(tape, &GraphBatch::new(&v2)?)?;
    info_nce(tape, z1, z2, cfg.temperature)
}

/// Pretraining loss of one batch recorded on `tape`.
pub fn pretrain_objective(
    tape: &mut Tape,
    vars: &EncoderVars,
    graphs: &[&Graph],
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<Var> {
    match cfg.objective {
        Objective::Contrastive => contrastive_objective(tape, vars, graphs, cfg, rng),
        Objective::EdgePred => edge_pred_objective(tape, vars, graphs, cfg.neg_ratio, rng),
    }
}

/// Loss and flat gradient of the pretraining objective on one batch.
pub fn pretrain_grad(
    params: &EncoderParams,
    graphs: &[&Graph],
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let loss = pretrain_objective(&mut tape, &vars, graphs, cfg, rng)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), vars.flat_grad(&grads)))
}

/// Seeded encoder initialization shared by plain and watermarked training.
pub fn init_encoder(feature_dim: usize, cfg: &PretrainConfig) -> EncoderParams {
    let mut rng = rng_from(derive_seed(cfg.seed, stream::INIT));
    EncoderParams::init(feature_dim, cfg.hidden_dim, cfg.num_layers, &mut rng)
}

/// Per-epoch means of the logged losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub pretrain_loss: f64,
    pub watermark_loss: f64,
}

/// Minibatch training of the pretraining objective. `extra` is called once
/// per step with the current parameters and the pretraining gradient; it may
/// add further terms to the gradient and returns a loss value to log.
pub(crate) fn train_encoder(
    dataset: &Dataset,
    cfg: &PretrainConfig,
    mut params: EncoderParams,
    mut extra: impl FnMut(&EncoderParams, &mut Vec<f64>) -> Result<f64>,
) -> Result<(EncoderParams, Vec<EpochStats>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = rng_from(derive_seed(cfg.seed, stream::PRETRAIN));
    let mut adam = Adam::new(params.num_params(), cfg.learning_rate);
    let min_batch = match cfg.objective {
        Objective::Contrastive => 2,
        Objective::EdgePred => 1,
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut pre_sum, mut wm_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let graphs: Vec<&Graph> = chunk.iter().map(|&i| &dataset.graphs()[i]).collect();
            let (loss, mut grad) = pretrain_grad(&params, &graphs, cfg, &mut rng)?;
            let wm = extra(&params, &mut grad)?;
            let mut flat = params.flatten();
            adam.step(&mut flat, &grad);
            params.assign_flat(&flat);
            pre_sum += loss;
            wm_sum += wm;
            steps += 1;
        }
        let denom = steps.max(1) as f64;
        curve.push(EpochStats {
            epoch: epoch + 1,
            pretrain_loss: pre_sum / denom,
            watermark_loss: wm_sum / denom,
        });
    }
    if !params.is_finite() {
        return Err(invalid("training diverged to non-finite parameters"));
    }
    Ok((params, curve))
}

/// Plain (non-watermarked) pretraining from the seeded initialization.
pub fn pretrain(dataset: &Dataset, cfg: &PretrainConfig) -> Result<EncoderParams> {
    pretrain_with_curve(dataset, cfg).map(|(p, _)| p)
}

pub fn pretrain_with_curve(dataset: &Dataset, cfg: &PretrainConfig) -> Result<(EncoderParams, Vec<EpochStats>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let init = init_encoder(dataset.feature_dim(), cfg);
    train_encoder(dataset, cfg, init, |_, _| Ok(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_coord, relative_error};
    use crate::graphs::{synth_benchmark, BenchmarkSpec};
    use rand::Rng as _;

    fn small_dataset(n: usize, seed: u64) -> Dataset {
        let spec = BenchmarkSpec {
            num_graphs: n,
            ..BenchmarkSpec::default()
        };
        synth_benchmark(&spec, &mut rng_from(seed)).unwrap()
    }

    #[test]
    fn orthonormal_pair_loss() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = info_nce_loss(&z, &z, 1.0).unwrap();
        let oracle = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn identical_rows_give_log_batch() {
        for b in [2usize, 3, 7] {
            let z = Tensor::matrix(b, 3, [0.3, -1.0, 2.0].repeat(b)).unwrap();
            let l = info_nce_loss(&z, &z, 0.5).unwrap();
            assert!((l - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_negatives_vanish_at_low_temperature() {
        let z1 = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let l = info_nce_loss(&z1, &z1, 0.01).unwrap();
        assert!(l < 1e-80);
    }

    #[test]
    fn zero_rows_have_zero_similarity() {
        let z1 = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let l = info_nce_loss(&z1, &z1, 1.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn info_nce_rejects_bad_input() {
        let one = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(info_nce_loss(&one, &one, 1.0).is_err());
        let two = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let three = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert!(info_nce_loss(&two, &three, 1.0).is_err());
        assert!(info_nce_loss(&two, &two, 0.0).is_err());
    }

    #[test]
    fn info_nce_permutation_symmetric() {
        let mut rng = rng_from(4);
        for _ in 0..50 {
            let b = rng.random_range(2..7);
            let d = rng.random_range(1..5);
            let draw = |rng: &mut Rng| -> Vec<f64> { (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let (v1, v2) = (draw(&mut rng), draw(&mut rng));
            let mut perm: Vec<usize> = (0..b).collect();
            perm.shuffle(&mut rng);
            let permute = |v: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&i| v[i * d..(i + 1) * d].to_vec()).collect() };
            let base = info_nce_loss(&Tensor::matrix(b, d, v1.clone()).unwrap(), &Tensor::matrix(b, d, v2.clone()).unwrap(), 0.5)
                .unwrap();
            let perm_loss = info_nce_loss(
                &Tensor::matrix(b, d, permute(&v1)).unwrap(),
                &Tensor::matrix(b, d, permute(&v2)).unwrap(),
                0.5,
            )
            .unwrap();
            assert!((base - perm_loss).abs() < 1e-12);
        }
    }

    fn zero_encoder(dim: usize) -> EncoderParams {
        let mut p = EncoderParams::init(dim, 4, 2, &mut rng_from(0));
        let n = p.num_params();
        p.assign_flat(&vec![0.0; n]);
        p
    }

    fn path(n: usize, edges: Vec<(usize, usize)>) -> Graph {
        Graph::new("p", n, edges, Tensor::matrix(n, 2, vec![1.0; 2 * n]).unwrap(), None).unwrap()
    }

    #[test]
    fn zero_scores_give_log_two() {
        let g = path(5, vec![(0, 1), (1, 2), (2, 3)]);
        let l = edge_pred_loss(&g, &zero_encoder(2), 1.0, &mut rng_from(1)).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_edge_counts() {
        let g = path(3, vec![(0, 1)]);
        let (pairs, labels) = edge_pred_pairs(&g, 1.0, &mut rng_from(2));
        assert_eq!(pairs.len(), 2);
        assert_eq!(labels, vec![1.0, 0.0]);
        assert!(!g.has_edge(pairs[1].0, pairs[1].1));
    }

    #[test]
    fn complete_graph_positives_only() {
        let g = path(3, vec![(0, 1), (0, 2), (1, 2)]);
        let (pairs, labels) = edge_pred_pairs(&g, 1.0, &mut rng_from(2));
        assert_eq!(pairs.len(), 3);
        assert!(labels.iter().all(|&l| l == 1.0));
        assert!(edge_pred_loss(&g, &zero_encoder(2), 1.0, &mut rng_from(2)).is_ok());
        assert!(edge_pred_loss(&path(3, vec![]), &zero_encoder(2), 1.0, &mut rng_from(2)).is_err());
    }

    #[test]
    fn saturated_scores_give_zero_loss() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![1e6, -1e6]));
        let l = tape.bce_logits(z, Arc::new(vec![1.0, 0.0])).unwrap();
        assert!(tape.value(l).item() < 1e-12);
    }

    fn check_objective_grad(cfg: &PretrainConfig) {
        let data = small_dataset(6, 3);
        let params = EncoderParams::init(data.feature_dim(), 5, 2, &mut rng_from(8));
        let graphs: Vec<&Graph> = data.graphs().iter().take(4).collect();
        let (_, grad) = pretrain_grad(&params, &graphs, cfg, &mut rng_from(77)).unwrap();
        let flat = params.flatten();
        let mut pick = rng_from(5);
        for _ in 0..40 {
            let i = pick.random_range(0..flat.len());
            let num = finite_diff_coord(
                |x| {
                    let mut p = params.clone();
                    p.assign_flat(x);
                    let mut tape = Tape::new();
                    let vars = p.bind(&mut tape, false);
                    let l = pretrain_objective(&mut tape, &vars, &graphs, cfg, &mut rng_from(77)).unwrap();
                    tape.value(l).item()
                },
                &flat,
                i,
                1e-6,
            );
            assert!(relative_error(grad[i], num, 1e-3) < 1e-4, "coord {i}: {} vs {num}", grad[i]);
        }
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        check_objective_grad(&PretrainConfig::default());
    }

    #[test]
    fn edge_pred_gradient_matches_finite_differences() {
        check_objective_grad(&PretrainConfig {
            objective: Objective::EdgePred,
            ..PretrainConfig::default()
        });
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = small_dataset(10, 1);
        let cfg = PretrainConfig {
            epochs: 0,
            seed: 9,
            ..PretrainConfig::default()
        };
        assert_eq!(pretrain(&data, &cfg).unwrap(), init_encoder(data.feature_dim(), &cfg));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let data = small_dataset(12, 1);
        for objective in [Objective::Contrastive, Objective::EdgePred] {
            let cfg = PretrainConfig {
                objective,
                epochs: 2,
                batch_size: 4,
                hidden_dim: 8,
                seed: 3,
                ..PretrainConfig::default()
            };
            let a = pretrain(&data, &cfg).unwrap();
            let b = pretrain(&data, &cfg).unwrap();
            assert_eq!(a.flatten(), b.flatten());
            let c = pretrain(&data, &PretrainConfig { seed: 4, ..cfg }).unwrap();
            assert_ne!(a.flatten(), c.flatten());
        }
    }

    #[test]
    fn config_validation() {
        let bad = PretrainConfig {
            batch_size: 1,
            ..PretrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PretrainConfig {
            temperature: 0.0,
            ..PretrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "temperature"));
        let empty = Dataset::new(vec![], 2, None).unwrap();
        assert!(pretrain(&empty, &PretrainConfig::default()).is_err());
    }
}
