use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::downstream::{accuracy, train_downstream, DownstreamConfig, Scenario};
use super::removal::{overwrite, prune};
use crate::encoder::EncoderParams;
use crate::error::{invalid, Error, Result};
use crate::graphs::{feature_moments, Dataset};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::rng::{derive_seed, rng_from, stream};
use crate::verify::{ip_score, summarize, Provenance, SummaryRecord, SuspectModel, VerificationReport};
use crate::watermark::{build_key, InjectionConfig, InjectionMode, WatermarkKey};

/// What the adversary does to each piracy model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackSchedule {
    #[default]
    None,
    /// Prune the encoder of the trained downstream model.
    Prune { rate: f64 },
    /// Inject the adversary's own key before downstream training.
    Overwrite,
    /// Finetune for the given epochs, then prune.
    FinetuneThenPrune { epochs: usize, rate: f64 },
}

impl AttackSchedule {
    pub fn tag(&self) -> String {
        match self {
            AttackSchedule::None => "none".into(),
            AttackSchedule::Prune { rate } => format!("prune{rate}"),
            AttackSchedule::Overwrite => "overwrite".into(),
            AttackSchedule::FinetuneThenPrune { epochs, rate } => format!("finetune{epochs}_prune{rate}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AttackSchedule::Prune { rate } | AttackSchedule::FinetuneThenPrune { rate, .. } if !(0.0..=1.0).contains(&rate) => Err(Error::Config {
                field: "rate".into(),
                msg: "must lie in [0, 1]".into(),
            }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooSpec {
    pub n_piracy: usize,
    pub n_independent: usize,
    pub downstream: DownstreamConfig,
    pub attack: AttackSchedule,
    /// Adversary's injection settings for [`AttackSchedule::Overwrite`].
    pub adversary: InjectionConfig,
    pub seed: u64,
}

impl Default for ZooSpec {
    fn default() -> Self {
        Self {
            n_piracy: 10,
            n_independent: 10,
            downstream: DownstreamConfig::default(),
            attack: AttackSchedule::None,
            adversary: InjectionConfig {
                mode: InjectionMode::Plain,
                ..InjectionConfig::default()
            },
            seed: 0,
        }
    }
}

impl ZooSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_piracy == 0 {
            return Err(Error::Config {
                field: "n_piracy".into(),
                msg: "must be at least 1".into(),
            });
        }
        if self.n_independent == 0 {
            return Err(Error::Config {
                field: "n_independent".into(),
                msg: "must be at least 1".into(),
            });
        }
        self.downstream.validate().map_err(|e| prefix("downstream", e))?;
        self.adversary.validate().map_err(|e| prefix("adversary", e))?;
        self.attack.validate().map_err(|e| prefix("attack", e))
    }
}

fn prefix(path: &str, e: Error) -> Error {
    match e {
        Error::Config { field, msg } => Error::Config {
            field: format!("{path}.{field}"),
            msg,
        },
        other => other,
    }
}

/// Seed of zoo member `i` of the given population.
pub fn member_seed(zoo_seed: u64, provenance: Provenance, i: usize) -> u64 {
    let base = match provenance {
        Provenance::Piracy => stream::PIRACY,
        _ => stream::INDEPENDENT,
    };
    derive_seed(zoo_seed, base + i as u64)
}

#[derive(Debug, Clone)]
pub struct ZooMember {
    pub report: VerificationReport,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ZooOutcome {
    pub members: Vec<ZooMember>,
    pub summary: SummaryRecord,
}

impl ZooOutcome {
    pub fn reports(&self) -> Vec<VerificationReport> {
        self.members.iter().map(|m| m.report.clone()).collect()
    }

    pub fn accuracies(&self) -> Vec<Option<f64>> {
        self.members.iter().map(|m| m.accuracy).collect()
    }

    fn scores(&self, kind: Provenance) -> Vec<f64> {
        self.members
            .iter()
            .filter(|m| m.report.provenance == kind)
            .map(|m| m.report.ip_score)
            .collect()
    }

    pub fn piracy_scores(&self) -> Vec<f64> {
        self.scores(Provenance::Piracy)
    }

    pub fn independent_scores(&self) -> Vec<f64> {
        self.scores(Provenance::Independent)
    }
}

/// Runs `f(0..n)` on a pool of `jobs` threads, keeping the input order.
pub fn run_parallel<T: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if jobs <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Fresh non-watermarked encoders, one per independent zoo member.
pub fn independent_encoders(data: &Dataset, cfg: &PretrainConfig, n: usize, zoo_seed: u64, jobs: usize) -> Result<Vec<EncoderParams>> {
    run_parallel(jobs, n, |i| {
        let cfg = PretrainConfig {
            seed: member_seed(zoo_seed, Provenance::Independent, i),
            ..cfg.clone()
        };
        pretrain(data, &cfg)
    })
}

/// Builds the piracy and independent populations and scores each against
/// `key`. Independent encoders are pretrained from scratch with `pretrain_cfg`.
pub fn build_zoo(
    watermarked: &EncoderParams,
    key: &WatermarkKey,
    spec: &ZooSpec,
    data: &Dataset,
    pretrain_cfg: &PretrainConfig,
    jobs: usize,
) -> Result<ZooOutcome> {
    spec.validate()?;
    let independents = independent_encoders(data, pretrain_cfg, spec.n_independent, spec.seed, jobs)?;
    build_zoo_with(watermarked, key, &independents, spec, data, jobs)
}

/// Downstream models on the independent encoders; they do not depend on the
/// key, so one set can be scored against many keys.
#[derive(Debug, Clone)]
pub struct IndependentModels {
    pub models: Vec<(SuspectModel, Option<f64>)>,
}

pub fn train_independents(independents: &[EncoderParams], spec: &ZooSpec, data: &Dataset, jobs: usize) -> Result<IndependentModels> {
    spec.validate()?;
    if independents.len() != spec.n_independent {
        return Err(invalid(format!(
            "zoo expects {} independent encoders, got {}",
            spec.n_independent,
            independents.len()
        )));
    }
    let models = run_parallel(jobs, independents.len(), |j| {
        let cfg = DownstreamConfig {
            seed: member_seed(spec.seed, Provenance::Independent, j),
            ..spec.downstream.clone()
        };
        let out = train_downstream(&independents[j], data, &cfg, format!("independent{j}"), Provenance::Independent)?;
        Ok((out.model, out.accuracy))
    })?;
    Ok(IndependentModels { models })
}

/// As [`build_zoo`], with precomputed independent encoders (reusable across
/// scenarios and attacks).
pub fn build_zoo_with(
    watermarked: &EncoderParams,
    key: &WatermarkKey,
    independents: &[EncoderParams],
    spec: &ZooSpec,
    data: &Dataset,
    jobs: usize,
) -> Result<ZooOutcome> {
    let trained = train_independents(independents, spec, data, jobs)?;
    build_zoo_against(watermarked, key, &trained, spec, data, jobs)
}

/// As [`build_zoo`], with already trained independent models.
pub fn build_zoo_against(
    watermarked: &EncoderParams,
    key: &WatermarkKey,
    independents: &IndependentModels,
    spec: &ZooSpec,
    data: &Dataset,
    jobs: usize,
) -> Result<ZooOutcome> {
    spec.validate()?;
    let mut members = run_parallel(jobs, spec.n_piracy, |i| piracy_member(watermarked, key, spec, data, i))?;
    for (model, acc) in &independents.models {
        members.push(ZooMember {
            report: ip_score(model, key)?,
            accuracy: *acc,
        });
    }
    let reports: Vec<VerificationReport> = members.iter().map(|m| m.report.clone()).collect();
    let accs: Vec<Option<f64>> = members.iter().map(|m| m.accuracy).collect();
    let summary = summarize(&reports, &accs)?;
    Ok(ZooOutcome { members, summary })
}

fn piracy_member(watermarked: &EncoderParams, key: &WatermarkKey, spec: &ZooSpec, data: &Dataset, i: usize) -> Result<ZooMember> {
    let seed = member_seed(spec.seed, Provenance::Piracy, i);
    let mut cfg = DownstreamConfig {
        seed,
        ..spec.downstream.clone()
    };
    let mut encoder = watermarked.clone();
    match spec.attack {
        AttackSchedule::Overwrite => {
            let adv = InjectionConfig {
                pretrain: PretrainConfig {
                    seed,
                    ..spec.adversary.pretrain.clone()
                },
                ..spec.adversary.clone()
            };
            let key_seed = derive_seed(seed, stream::KEY);
            let adv_key = build_key(&adv, &feature_moments(data)?, Some(data), key_seed, &mut rng_from(key_seed))?;
            encoder = overwrite(&encoder, adv_key, data, &adv)?;
        }
        AttackSchedule::FinetuneThenPrune { epochs, .. } => {
            cfg.scenario = Scenario::Finetune;
            cfg.epochs = epochs;
        }
        AttackSchedule::None | AttackSchedule::Prune { .. } => {}
    }
    let out = train_downstream(&encoder, data, &cfg, format!("piracy{i}"), Provenance::Piracy)?;
    let mut model = out.model;
    let mut acc = out.accuracy;
    if let AttackSchedule::Prune { rate } | AttackSchedule::FinetuneThenPrune { rate, .. } = spec.attack {
        model.encoder = prune(&model.encoder, rate)?;
        acc = accuracy(&model, data, &out.split.test)?;
    }
    Ok(ZooMember {
        report: ip_score(&model, key)?,
        accuracy: acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{synth_benchmark, BenchmarkSpec};
    use crate::pretrain::init_encoder;

    fn setup() -> (Dataset, PretrainConfig, WatermarkKey) {
        let d = synth_benchmark(
            &BenchmarkSpec {
                num_graphs: 30,
                size_range: (5, 8),
                ..BenchmarkSpec::default()
            },
            &mut rng_from(1),
        )
        .unwrap();
        let pcfg = PretrainConfig {
            epochs: 1,
            hidden_dim: 6,
            batch_size: 16,
            ..PretrainConfig::default()
        };
        let icfg = InjectionConfig {
            num_pairs: 4,
            base_node_count: 4,
            node_count_delta: 2,
            ..InjectionConfig::default()
        };
        let key = build_key(&icfg, &feature_moments(&d).unwrap(), None, 5, &mut rng_from(5)).unwrap();
        (d, pcfg, key)
    }

    fn small_spec(n: usize) -> ZooSpec {
        ZooSpec {
            n_piracy: n,
            n_independent: n,
            downstream: DownstreamConfig {
                epochs: 3,
                ..DownstreamConfig::default()
            },
            ..ZooSpec::default()
        }
    }

    #[test]
    fn single_pair_roc_is_discrete() {
        let (d, pcfg, key) = setup();
        let wm = init_encoder(d.feature_dim(), &pcfg);
        let out = build_zoo(&wm, &key, &small_spec(1), &d, &pcfg, 1).unwrap();
        assert!([0.0, 0.5, 1.0].contains(&out.summary.ip_roc));
        assert_eq!(out.members.len(), 2);
    }

    #[test]
    fn deterministic_across_job_counts() {
        let (d, pcfg, key) = setup();
        let wm = init_encoder(d.feature_dim(), &pcfg);
        let spec = ZooSpec {
            attack: AttackSchedule::Prune { rate: 0.3 },
            ..small_spec(2)
        };
        let a = build_zoo(&wm, &key, &spec, &d, &pcfg, 1).unwrap();
        let b = build_zoo(&wm, &key, &spec, &d, &pcfg, 3).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.reports(), b.reports());
    }

    #[test]
    fn schedules_run() {
        let (d, pcfg, key) = setup();
        let wm = init_encoder(d.feature_dim(), &pcfg);
        let inds = independent_encoders(&d, &pcfg, 1, 0, 1).unwrap();
        let adversary = InjectionConfig {
            num_pairs: 2,
            base_node_count: 4,
            node_count_delta: 2,
            mode: InjectionMode::Plain,
            pretrain: pcfg.clone(),
            ..InjectionConfig::default()
        };
        for attack in [AttackSchedule::Overwrite, AttackSchedule::FinetuneThenPrune { epochs: 1, rate: 0.5 }] {
            let spec = ZooSpec {
                attack,
                adversary: adversary.clone(),
                ..small_spec(1)
            };
            let out = build_zoo_with(&wm, &key, &inds, &spec, &d, 1).unwrap();
            assert_eq!(out.piracy_scores().len(), 1);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = ZooSpec {
            n_piracy: 0,
            ..ZooSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config { field, .. }) if field == "n_piracy"));
        let spec = ZooSpec {
            attack: AttackSchedule::Prune { rate: 2.0 },
            ..ZooSpec::default()
        };
        assert!(spec.validate().is_err());
        let mut spec = ZooSpec::default();
        spec.downstream.label_rate = 0.0;
        assert!(matches!(spec.validate(), Err(Error::Config { field, .. }) if field == "downstream.label_rate"));
    }
}
