//! Experiment configuration and the end-to-end pipeline: benchmark,
//! baseline pretraining, injection, model zoos in both scenarios, removal
//! attacks and verification reports.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::info;

use crate::attacks::{
    build_zoo_against, independent_encoders, train_independents, AttackSchedule, DownstreamConfig, IndependentModels, Scenario,
    ZooOutcome, ZooSpec,
};
use crate::encoder::{save_checkpoint, Checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::graphs::{save_dataset, synth_benchmark, BenchmarkSpec, Dataset};
use crate::pretrain::{pretrain_with_curve, EpochStats, PretrainConfig};
use crate::rng::{derive_seed, rng_from, stream};
use crate::verify::{write_csv, write_model_records, SummaryRecord};
use crate::watermark::{inject, save_key, Injection, InjectionConfig, InjectionMode};

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Desk-scale pretraining schedule shared by the baseline, the watermarked
/// encoder and every independent encoder.
pub fn desk_pretrain() -> PretrainConfig {
    PretrainConfig {
        epochs: 40,
        hidden_dim: 32,
        learning_rate: 1e-2,
        ..PretrainConfig::default()
    }
}

/// Injection settings with the budget scaled to the desk model size.
pub fn desk_injection() -> InjectionConfig {
    InjectionConfig {
        epsilon: 1.0,
        ..InjectionConfig::default()
    }
}

fn default_attacks() -> Vec<AttackSchedule> {
    vec![
        AttackSchedule::Prune { rate: 0.3 },
        AttackSchedule::Overwrite,
        AttackSchedule::FinetuneThenPrune { epochs: 100, rate: 0.3 },
    ]
}

fn default_adversary() -> InjectionConfig {
    InjectionConfig {
        mode: InjectionMode::Plain,
        ..InjectionConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooSize {
    pub n_piracy: usize,
    pub n_independent: usize,
}

impl Default for ZooSize {
    fn default() -> Self {
        Self {
            n_piracy: 10,
            n_independent: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub epsilons: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.01, 0.1, 1.0, 5.0, 10.0],
            epsilons: vec![0.1, 1.0, 2.0, 5.0, 10.0],
        }
    }
}

/// One experiment, as read from a TOML file. Only `seed` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub benchmark: BenchmarkSpec,
    #[serde(default = "desk_pretrain")]
    pub pretrain: PretrainConfig,
    #[serde(default = "desk_injection")]
    pub injection: InjectionConfig,
    /// Scenario is set per zoo; the value here is used by the `downstream`
    /// command.
    #[serde(default)]
    pub downstream: DownstreamConfig,
    #[serde(default)]
    pub zoo: ZooSize,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackSchedule>,
    /// Overwriting adversary; its training schedule is `pretrain`.
    #[serde(default = "default_adversary")]
    pub adversary: InjectionConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            benchmark: BenchmarkSpec::default(),
            pretrain: desk_pretrain(),
            injection: desk_injection(),
            downstream: DownstreamConfig::default(),
            zoo: ZooSize::default(),
            attacks: default_attacks(),
            adversary: default_adversary(),
            sweep: SweepConfig::default(),
        }
    }
}

fn under(path: &str, e: Error) -> Error {
    match e {
        Error::Config { field, msg } => Error::Config {
            field: format!("{path}.{field}"),
            msg,
        },
        Error::InvalidArgument(msg) => Error::Config {
            field: path.to_string(),
            msg,
        },
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            field: "<file>".into(),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate().map_err(|e| under("benchmark", e))?;
        self.pretrain.validate().map_err(|e| under("pretrain", e))?;
        self.injection_config().validate().map_err(|e| under("injection", e))?;
        self.downstream.validate().map_err(|e| under("downstream", e))?;
        self.zoo_spec(Scenario::Fix, AttackSchedule::None).validate().map_err(|e| match e {
            Error::Config { field, msg } if field.starts_with("n_") => Error::Config {
                field: format!("zoo.{field}"),
                msg,
            },
            other => other,
        })?;
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate().map_err(|e| under(&format!("attacks[{i}]"), e))?;
        }
        for (i, &l) in self.sweep.lambdas.iter().enumerate() {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config {
                    field: format!("sweep.lambdas[{i}]"),
                    msg: "must be a finite value ≥ 0".into(),
                });
            }
        }
        for (i, &e) in self.sweep.epsilons.iter().enumerate() {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::Config {
                    field: format!("sweep.epsilons[{i}]"),
                    msg: "must be a finite value ≥ 0".into(),
                });
            }
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn injection_config(&self) -> InjectionConfig {
        InjectionConfig {
            pretrain: self.pretrain_config(),
            ..self.injection.clone()
        }
    }

    pub fn zoo_spec(&self, scenario: Scenario, attack: AttackSchedule) -> ZooSpec {
        ZooSpec {
            n_piracy: self.zoo.n_piracy,
            n_independent: self.zoo.n_independent,
            downstream: DownstreamConfig {
                scenario,
                ..self.downstream.clone()
            },
            attack,
            adversary: InjectionConfig {
                pretrain: self.pretrain_config(),
                ..self.adversary.clone()
            },
            seed: self.seed,
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        synth_benchmark(&self.benchmark, &mut rng_from(derive_seed(self.seed, stream::BENCHMARK)))
    }
}

/// Append-only JSON-lines log; a no-op when no directory is attached.
pub struct RunLog {
    file: Option<File>,
    start: Instant,
}

impl RunLog {
    pub fn disabled() -> Self {
        Self {
            file: None,
            start: Instant::now(),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Some(file),
            start: Instant::now(),
        })
    }

    pub fn record(&mut self, event: &str, mut fields: serde_json::Value) -> Result<()> {
        if let Some(f) = &mut self.file {
            if let Some(map) = fields.as_object_mut() {
                map.insert("event".into(), json!(event));
                map.insert("elapsed_s".into(), json!(self.start.elapsed().as_secs_f64()));
            }
            writeln!(f, "{fields}")?;
        }
        Ok(())
    }

    pub fn curve(&mut self, stage: &str, curve: &[EpochStats]) -> Result<()> {
        for s in curve {
            self.record(
                "epoch",
                json!({"stage": stage, "epoch": s.epoch, "pretrain_loss": s.pretrain_loss, "watermark_loss": s.watermark_loss}),
            )?;
        }
        Ok(())
    }
}

pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[EpochStats]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,pretrain_loss,watermark_loss")?;
    for s in curve {
        writeln!(w, "{},{},{}", s.epoch, s.pretrain_loss, s.watermark_loss)?;
    }
    w.flush()?;
    Ok(())
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: String,
    pub attack: String,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub ip_gap: f64,
    pub ip_roc: f64,
}

impl SummaryRow {
    pub fn new(scenario: &str, method: &str, attack: &str, s: &SummaryRecord) -> Self {
        Self {
            scenario: scenario.into(),
            method: method.into(),
            attack: attack.into(),
            accuracy_mean: s.piracy_accuracy_mean,
            accuracy_std: s.piracy_accuracy_std,
            ip_gap: s.ip_gap,
            ip_roc: s.ip_roc,
        }
    }
}

pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "scenario,method,attack,accuracy_mean,accuracy_std,ip_gap,ip_roc")?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.scenario,
            r.method,
            r.attack,
            opt(r.accuracy_mean),
            opt(r.accuracy_std),
            r.ip_gap,
            r.ip_roc
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Writes per-model records, the delimited model table and the summary
/// record of one zoo under `dir/name.*`.
pub fn write_zoo_reports(dir: &Path, name: &str, zoo: &ZooOutcome) -> Result<()> {
    let reports = zoo.reports();
    let accs = zoo.accuracies();
    let mut w = BufWriter::new(File::create(dir.join(format!("{name}.models.jsonl")))?);
    write_model_records(&mut w, &reports, &accs)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join(format!("{name}.models.csv")))?);
    write_csv(&mut w, &reports, &accs)?;
    w.flush()?;
    let text = serde_json::to_string(&zoo.summary).map_err(std::io::Error::from)?;
    fs::write(dir.join(format!("{name}.summary.json")), text + "\n")?;
    Ok(())
}

/// Everything the pipeline produced, kept in memory for inspection.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dataset: Dataset,
    pub baseline: EncoderParams,
    pub injection: Injection,
    pub independents: Vec<EncoderParams>,
    pub rows: Vec<SummaryRow>,
    /// Zoos by name, e.g. `fix_watermarked_none`.
    pub zoos: Vec<(String, ZooOutcome)>,
}

impl ExperimentOutcome {
    pub fn zoo(&self, name: &str) -> Option<&ZooOutcome> {
        self.zoos.iter().find(|(n, _)| n == name).map(|(_, z)| z)
    }

    pub fn row(&self, scenario: &str, method: &str, attack: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.method == method && r.attack == attack)
    }
}

/// Where artifacts go; `None` keeps everything in memory.
pub struct Artifacts<'a> {
    pub dir: Option<&'a Path>,
    pub log: RunLog,
}

impl Artifacts<'_> {
    pub fn none() -> Artifacts<'static> {
        Artifacts {
            dir: None,
            log: RunLog::disabled(),
        }
    }

    pub fn in_dir(dir: &Path) -> Result<Artifacts<'_>> {
        fs::create_dir_all(dir)?;
        let log = RunLog::open(dir.join("log.jsonl"))?;
        Ok(Artifacts { dir: Some(dir), log })
    }
}

/// Scenarios, attacks and zoos of the full pipeline. Stages write their
/// artifacts as soon as they finish, so a failure keeps earlier results.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize, out: &mut Artifacts) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dataset = cfg.dataset()?;
    if let Some(dir) = out.dir {
        save_dataset(&dataset, dir.join("dataset.jsonl"))?;
    }
    out.log.record("dataset", json!({"graphs": dataset.len(), "feature_dim": dataset.feature_dim()}))?;

    info!("pretraining the non-watermarked baseline");
    let (baseline, curve) = pretrain_with_curve(&dataset, &cfg.pretrain_config())?;
    out.log.curve("baseline", &curve)?;
    if let Some(dir) = out.dir {
        save_checkpoint(
            &Checkpoint {
                tag: "baseline".into(),
                encoder: baseline.clone(),
                head: None,
            },
            dir.join("baseline.ckpt.json"),
        )?;
    }

    info!("injecting the watermark");
    let injection = inject(&dataset, &cfg.injection_config())?;
    out.log.curve("inject", &injection.curve)?;
    out.log.record(
        "injected",
        json!({"initial_watermark_loss": injection.initial_watermark_loss, "final_watermark_loss": injection.final_watermark_loss}),
    )?;
    if let Some(dir) = out.dir {
        save_checkpoint(
            &Checkpoint {
                tag: format!("watermarked-{}", cfg.injection.ablation.tag()),
                encoder: injection.encoder.clone(),
                head: None,
            },
            dir.join("watermarked.ckpt.json"),
        )?;
        save_key(&injection.key, dir.join("key.jsonl"))?;
        write_curve_csv(dir.join("curve.csv"), &injection.curve)?;
    }

    info!("pretraining {} independent encoders", cfg.zoo.n_independent);
    let independents = independent_encoders(&dataset, &cfg.pretrain_config(), cfg.zoo.n_independent, cfg.seed, jobs)?;

    let mut rows = Vec::new();
    let mut zoos = Vec::new();
    for scenario in [Scenario::Fix, Scenario::Finetune] {
        let sc = scenario.as_str();
        let spec = cfg.zoo_spec(scenario, AttackSchedule::None);
        let trained = train_independents(&independents, &spec, &dataset, jobs)?;
        let mut scenario_rows = Vec::new();
        for (method, encoder) in [("watermarked", &injection.encoder), ("non_watermarked", &baseline)] {
            let name = format!("{sc}_{method}_none");
            info!("zoo {name}");
            let zoo = build_zoo_against(encoder, &injection.key, &trained, &spec, &dataset, jobs)?;
            scenario_rows.push(SummaryRow::new(sc, method, "none", &zoo.summary));
            finish_zoo(out, &name, &zoo)?;
            zoos.push((name, zoo));
        }
        if scenario == Scenario::Fix {
            for attack in &cfg.attacks {
                let name = format!("{sc}_watermarked_{}", attack.tag());
                info!("zoo {name}");
                let spec = cfg.zoo_spec(scenario, *attack);
                let zoo = build_zoo_against(&injection.encoder, &injection.key, &trained, &spec, &dataset, jobs)?;
                scenario_rows.push(SummaryRow::new(sc, "watermarked", &attack.tag(), &zoo.summary));
                finish_zoo(out, &name, &zoo)?;
                zoos.push((name, zoo));
            }
        }
        if let Some(dir) = out.dir {
            write_summary_csv(dir.join(format!("summary_{sc}.csv")), &scenario_rows)?;
        }
        rows.extend(scenario_rows);
    }
    if let Some(dir) = out.dir {
        write_summary_jsonl(&dir.join("summary.jsonl"), &rows)?;
    }
    Ok(ExperimentOutcome {
        dataset,
        baseline,
        injection,
        independents,
        rows,
        zoos,
    })
}

fn finish_zoo(out: &mut Artifacts, name: &str, zoo: &ZooOutcome) -> Result<()> {
    out.log.record("zoo", json!({"name": name, "summary": zoo.summary}))?;
    if let Some(dir) = out.dir {
        write_zoo_reports(dir, name, zoo)?;
    }
    Ok(())
}

fn write_summary_jsonl(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One-at-a-time sweep: each λ at the configured ε, then each ε at the
/// configured λ; one summary row per point and scenario.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize, out: &mut Artifacts) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let dataset = cfg.dataset()?;
    let independents = independent_encoders(&dataset, &cfg.pretrain_config(), cfg.zoo.n_independent, cfg.seed, jobs)?;
    let trained: Vec<(Scenario, IndependentModels)> = [Scenario::Fix, Scenario::Finetune]
        .into_iter()
        .map(|s| Ok((s, train_independents(&independents, &cfg.zoo_spec(s, AttackSchedule::None), &dataset, jobs)?)))
        .collect::<Result<_>>()?;
    let base = cfg.injection_config();
    let points = cfg
        .sweep
        .lambdas
        .iter()
        .map(|&l| (l, base.epsilon))
        .chain(cfg.sweep.epsilons.iter().map(|&e| (base.lambda, e)));
    let mut rows = Vec::new();
    for (lambda, epsilon) in points {
        let method = format!("watermarked_lambda{lambda}_eps{epsilon}");
        info!("sweep point {method}");
        let inj = inject(
            &dataset,
            &InjectionConfig {
                lambda,
                epsilon,
                ..base.clone()
            },
        )?;
        for (scenario, models) in &trained {
            let spec = cfg.zoo_spec(*scenario, AttackSchedule::None);
            let zoo = build_zoo_against(&inj.encoder, &inj.key, models, &spec, &dataset, jobs)?;
            let row = SummaryRow::new(scenario.as_str(), &method, "none", &zoo.summary);
            out.log.record("sweep_point", json!({"lambda": lambda, "epsilon": epsilon, "row": row}))?;
            rows.push(row);
        }
        if let Some(dir) = out.dir {
            write_summary_csv(dir.join("sweep.csv"), &rows)?;
        }
    }
    Ok(rows)
}
