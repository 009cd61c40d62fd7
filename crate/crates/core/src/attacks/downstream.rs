use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{encode_many, predict_class, Activation, BoundParams, ClassifierParams, EncoderParams, GraphBatch, ParamSet};
use crate::error::{invalid, Error, Result};
use crate::graphs::{Dataset, Graph};
use crate::optim::Adam;
use crate::rng::{derive_seed, rng_from, stream};
use crate::verify::{Provenance, SuspectModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Encoder frozen, only the head is trained.
    #[default]
    Fix,
    /// Encoder and head trained jointly.
    Finetune,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Fix => "fix",
            Scenario::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub scenario: Scenario,
    pub epochs: usize,
    /// Fraction of graphs used for training; the rest is held out.
    pub label_rate: f64,
    pub learning_rate: f64,
    /// Encoder step size in the finetune scenario; `None` uses `learning_rate`.
    pub encoder_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub head_depth: usize,
    pub head_hidden: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Fix,
            epochs: 100,
            label_rate: 0.5,
            learning_rate: 1e-2,
            encoder_learning_rate: Some(1e-3),
            batch_size: 32,
            head_depth: 2,
            head_hidden: 32,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(Error::Config {
                field: field.into(),
                msg: msg.into(),
            })
        };
        if !(self.label_rate > 0.0 && self.label_rate <= 1.0) {
            return bad("label_rate", "must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if let Some(lr) = self.encoder_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("encoder_learning_rate", "must be positive");
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.head_depth == 0 {
            return bad("head_depth", "must be at least 1");
        }
        if self.head_hidden == 0 {
            return bad("head_hidden", "must be at least 1");
        }
        Ok(())
    }
}

/// Seeded train / held-out split of graph indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, label_rate: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(derive_seed(seed, stream::SPLIT)));
    let n_train = ((label_rate * n as f64).round() as usize).min(n);
    let test = idx.split_off(n_train);
    Split { train: idx, test }
}

#[derive(Debug, Clone)]
pub struct DownstreamOutcome {
    pub model: SuspectModel,
    pub split: Split,
    /// Held-out accuracy; `None` when nothing is held out.
    pub accuracy: Option<f64>,
    pub losses: Vec<f64>,
}

/// Fraction of labeled graphs in `idx` the model classifies correctly.
pub fn accuracy(model: &SuspectModel, data: &Dataset, idx: &[usize]) -> Result<Option<f64>> {
    let graphs: Vec<Graph> = idx
        .iter()
        .map(|&i| &data.graphs()[i])
        .filter(|g| g.label().is_some())
        .cloned()
        .collect();
    if graphs.is_empty() {
        return Ok(None);
    }
    let emb = encode_many(&graphs, &model.encoder)?;
    let mut correct = 0usize;
    for (r, g) in graphs.iter().enumerate() {
        if predict_class(emb.row(r), &model.head)? == g.label().unwrap() {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / graphs.len() as f64))
}

/// Trains a classification head on top of `encoder` (and, when finetuning,
/// the encoder too) on the labeled part of a seeded split.
pub fn train_downstream(
    encoder: &EncoderParams,
    data: &Dataset,
    cfg: &DownstreamConfig,
    id: impl Into<String>,
    provenance: Provenance,
) -> Result<DownstreamOutcome> {
    cfg.validate()?;
    let split = split_indices(data.len(), cfg.label_rate, cfg.seed);
    let train: Vec<usize> = split
        .train
        .iter()
        .copied()
        .filter(|&i| data.graphs()[i].label().is_some())
        .collect();
    if train.is_empty() {
        return Err(invalid("no labeled graphs after the split"));
    }
    let classes = data
        .num_classes()
        .ok_or_else(|| invalid("dataset has no class labels"))?;
    let mut head_rng = rng_from(derive_seed(cfg.seed, stream::HEAD_INIT));
    let head = ClassifierParams::init(encoder.output_dim(), cfg.head_hidden, classes, cfg.head_depth, cfg.activation, &mut head_rng)?;
    let labels: Vec<usize> = data.graphs().iter().map(|g| g.label().unwrap_or(0)).collect();

    let (encoder, head, losses) = match cfg.scenario {
        Scenario::Fix => {
            let emb = encode_many(data.graphs(), encoder)?;
            let (head, losses) = train_head(&emb, &labels, &train, head, cfg)?;
            (encoder.clone(), head, losses)
        }
        Scenario::Finetune => finetune(encoder.clone(), head, data, &labels, &train, cfg)?,
    };
    let model = SuspectModel::new(id, encoder, head, provenance)?;
    let acc = accuracy(&model, data, &split.test)?;
    Ok(DownstreamOutcome {
        model,
        split,
        accuracy: acc,
        losses,
    })
}

fn rows(emb: &Tensor, idx: &[usize]) -> Tensor {
    let cols = emb.cols();
    let mut vals = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        vals.extend_from_slice(emb.row(i));
    }
    Tensor::matrix(idx.len(), cols, vals).expect("row gather")
}

fn train_head(
    emb: &Tensor,
    labels: &[usize],
    train: &[usize],
    mut head: ClassifierParams,
    cfg: &DownstreamConfig,
) -> Result<(ClassifierParams, Vec<f64>)> {
    let mut rng = rng_from(derive_seed(cfg.seed, stream::DOWNSTREAM));
    let mut adam = Adam::new(head.num_params(), cfg.learning_rate);
    let mut order = train.to_vec();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(rows(emb, chunk));
            let vars = head.bind(&mut tape, true);
            let logits = vars.logits(&mut tape, x)?;
            let targets = Arc::new(chunk.iter().map(|&i| labels[i]).collect());
            let loss = tape.softmax_xent(logits, targets)?;
            total += tape.value(loss).item() * chunk.len() as f64;
            let grad = vars.flat_grad(&tape.backward(loss)?);
            let mut flat = head.flatten();
            adam.step(&mut flat, &grad);
            head.assign_flat(&flat);
        }
        losses.push(total / order.len() as f64);
    }
    Ok((head, losses))
}

fn finetune(
    mut encoder: EncoderParams,
    mut head: ClassifierParams,
    data: &Dataset,
    labels: &[usize],
    train: &[usize],
    cfg: &DownstreamConfig,
) -> Result<(EncoderParams, ClassifierParams, Vec<f64>)> {
    let mut rng = rng_from(derive_seed(cfg.seed, stream::DOWNSTREAM));
    let mut enc_adam = Adam::new(encoder.num_params(), cfg.encoder_learning_rate.unwrap_or(cfg.learning_rate));
    let mut head_adam = Adam::new(head.num_params(), cfg.learning_rate);
    let mut order = train.to_vec();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = GraphBatch::new(chunk.iter().map(|&i| &data.graphs()[i]))?;
            let mut tape = Tape::new();
            let ev = encoder.bind(&mut tape, true);
            let hv = head.bind(&mut tape, true);
            let x = ev.embed(&mut tape, &batch)?;
            let logits = hv.logits(&mut tape, x)?;
            let targets = Arc::new(chunk.iter().map(|&i| labels[i]).collect());
            let loss = tape.softmax_xent(logits, targets)?;
            total += tape.value(loss).item() * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let mut flat = encoder.flatten();
            enc_adam.step(&mut flat, &ev.flat_grad(&grads));
            encoder.assign_flat(&flat);
            let mut flat = head.flatten();
            head_adam.step(&mut flat, &hv.flat_grad(&grads));
            head.assign_flat(&flat);
        }
        losses.push(total / order.len() as f64);
    }
    if !encoder.is_finite() || !head.is_finite() {
        return Err(invalid("downstream training diverged to non-finite parameters"));
    }
    Ok((encoder, head, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{synth_benchmark, BenchmarkSpec};
    use crate::pretrain::{init_encoder, PretrainConfig};

    fn data() -> Dataset {
        synth_benchmark(
            &BenchmarkSpec {
                num_graphs: 40,
                size_range: (6, 10),
                ..BenchmarkSpec::default()
            },
            &mut rng_from(2),
        )
        .unwrap()
    }

    fn encoder(d: &Dataset) -> EncoderParams {
        init_encoder(
            d.feature_dim(),
            &PretrainConfig {
                hidden_dim: 8,
                ..PretrainConfig::default()
            },
        )
    }

    #[test]
    fn split_is_seeded_partition() {
        let s = split_indices(11, 0.5, 3);
        assert_eq!(s.train.len(), 6);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert_eq!(s, split_indices(11, 0.5, 3));
        assert_ne!(s, split_indices(11, 0.5, 4));
        assert!(split_indices(5, 1.0, 0).test.is_empty());
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let d = data();
        let e = encoder(&d);
        for scenario in [Scenario::Fix, Scenario::Finetune] {
            let cfg = DownstreamConfig {
                epochs: 0,
                scenario,
                ..DownstreamConfig::default()
            };
            let out = train_downstream(&e, &d, &cfg, "m", Provenance::Unknown).unwrap();
            assert_eq!(out.model.encoder, e);
            let init = ClassifierParams::init(8, 32, 2, 2, Activation::Relu, &mut rng_from(derive_seed(0, stream::HEAD_INIT))).unwrap();
            assert_eq!(out.model.head, init);
        }
    }

    #[test]
    fn fix_leaves_encoder_untouched_and_learns() {
        let d = data();
        let e = encoder(&d);
        let cfg = DownstreamConfig {
            epochs: 30,
            ..DownstreamConfig::default()
        };
        let out = train_downstream(&e, &d, &cfg, "m", Provenance::Piracy).unwrap();
        assert_eq!(out.model.encoder, e);
        assert!(out.losses.last().unwrap() < &out.losses[0]);
        assert!(out.accuracy.unwrap() > 0.5);
    }

    #[test]
    fn finetune_moves_encoder() {
        let d = data();
        let e = encoder(&d);
        let cfg = DownstreamConfig {
            epochs: 3,
            scenario: Scenario::Finetune,
            ..DownstreamConfig::default()
        };
        let out = train_downstream(&e, &d, &cfg, "m", Provenance::Piracy).unwrap();
        assert_ne!(out.model.encoder, e);
        let again = train_downstream(&e, &d, &cfg, "m", Provenance::Piracy).unwrap();
        assert_eq!(out.model, again.model);
    }

    #[test]
    fn unlabeled_data_rejected() {
        let d = data();
        let unlabeled = Dataset::new(d.graphs().iter().cloned().map(|g| g.with_label(None)).collect(), d.feature_dim(), Some(2)).unwrap();
        let r = train_downstream(&encoder(&d), &unlabeled, &DownstreamConfig::default(), "m", Provenance::Unknown);
        assert!(r.is_err());
        let bad = DownstreamConfig {
            label_rate: 0.0,
            ..DownstreamConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    }
}
