//! Watermark keys, the watermark loss and finetuning-resistant injection.

mod inject;
mod key;
mod loss;

pub use inject::{inject, inject_from, inject_with_key, Injection};
pub use key::{build_key, load_key, save_key, KeyMetadata, KeySource, WatermarkKey};
pub use loss::{
    ascent_step_size, inner_ascent, outer_gradient, project_to_ball, watermark_grad, watermark_loss, watermark_objective,
    InnerTermWeighting,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;

/// Whether the inner adversarial ascent runs at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Joint objective `L_pre + λ·L_W(θ)`.
    Plain,
    /// Min-max objective `L_pre + λ·max_{‖δ‖≤ε} L_W(θ+δ)`.
    #[default]
    FinetuneResistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Drops the hinge that pushes key graphs away from real graphs.
    NoMargin,
    /// Key pairs are real graphs from the pretraining set.
    RealGraphKeys,
    /// No inner ascent (δ ≡ 0).
    NoFtr,
}

impl Ablation {
    pub fn tag(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMargin => "no_margin",
            Ablation::RealGraphKeys => "real_graph_keys",
            Ablation::NoFtr => "no_ftr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub num_pairs: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub inner_steps: usize,
    pub margin: f64,
    /// Real graphs sampled per step for the hinge term.
    pub neg_samples: usize,
    pub mode: InjectionMode,
    pub ablation: Ablation,
    pub inner_weighting: InnerTermWeighting,
    pub base_node_count: usize,
    pub node_count_delta: usize,
    pub edge_prob: f64,
    /// Edge probability of the larger graph of each pair; `edge_prob` if unset.
    pub edge_prob_b: Option<f64>,
    /// Training schedule of the host objective. Not part of the serialized
    /// form: experiment files configure pretraining once, at top level.
    #[serde(skip)]
    pub pretrain: PretrainConfig,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            num_pairs: 20,
            lambda: 0.1,
            epsilon: 2.0,
            inner_steps: 3,
            margin: 1.0,
            neg_samples: 32,
            mode: InjectionMode::FinetuneResistant,
            ablation: Ablation::Full,
            inner_weighting: InnerTermWeighting::Mean,
            base_node_count: 15,
            node_count_delta: 15,
            edge_prob: 0.2,
            edge_prob_b: None,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(Error::Config {
                field: field.to_string(),
                msg: msg.to_string(),
            })
        };
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda", "must be a finite value ≥ 0");
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad("epsilon", "must be a finite value ≥ 0");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps", "must be at least 1");
        }
        if !(self.margin > 0.0) {
            return bad("margin", "must be positive");
        }
        if self.neg_samples == 0 {
            return bad("neg_samples", "must be at least 1");
        }
        if self.base_node_count < 2 {
            return bad("base_node_count", "must be at least 2");
        }
        for (field, p) in [("edge_prob", Some(self.edge_prob)), ("edge_prob_b", self.edge_prob_b)] {
            if let Some(p) = p {
                if !(0.0..=1.0).contains(&p) {
                    return bad(field, "must lie in [0, 1]");
                }
            }
        }
        self.pretrain.validate().map_err(|e| match e {
            Error::Config { field, msg } => Error::Config {
                field: format!("pretrain.{field}"),
                msg,
            },
            other => other,
        })
    }

    /// Whether the inner ascent is skipped.
    pub fn skips_ascent(&self) -> bool {
        self.mode == InjectionMode::Plain || self.ablation == Ablation::NoFtr
    }

    pub fn hinge_margin(&self) -> Option<f64> {
        (self.ablation != Ablation::NoMargin).then_some(self.margin)
    }
}
