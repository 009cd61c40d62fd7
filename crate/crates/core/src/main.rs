use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use tracing::{info, warn};

use gnn_watermark::attacks::{
    build_zoo_against, independent_encoders, train_downstream, train_independents, AttackSchedule, Scenario,
};
use gnn_watermark::encoder::{load_checkpoint, save_checkpoint, Checkpoint};
use gnn_watermark::experiment::{run_experiment, run_sweep, write_curve_csv, write_zoo_reports, Artifacts, ExperimentConfig, RunLog};
use gnn_watermark::graphs::feature_moments;
use gnn_watermark::pretrain::pretrain_with_curve;
use gnn_watermark::rng::{derive_seed, rng_from, stream};
use gnn_watermark::verify::{ip_score, load_model, save_model, summarize, write_csv, write_model_records, Provenance, DEGENERATE_CAVEAT};
use gnn_watermark::watermark::{build_key, inject, load_key, save_key};
use gnn_watermark::Error;

#[derive(Parser)]
#[command(name = "gnnwm", version, about = "Watermarked GNN encoder pretraining and ownership verification")]
struct Cli {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for zoo members.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Fix,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Piracy,
    Independent,
    Unknown,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a watermark key and write it to `<out>/key.jsonl`.
    Keygen,
    /// Non-watermarked pretraining.
    Pretrain,
    /// Watermarked pretraining; writes checkpoint, key and training curve.
    Inject,
    /// Train a downstream classifier on a checkpoint's encoder.
    Downstream {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
        #[arg(long, value_enum, default_value = "unknown")]
        kind: KindArg,
        #[arg(long, default_value = "model")]
        id: String,
    },
    /// Score suspect models against a key.
    Verify {
        #[arg(long)]
        key: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Report stem; defaults to `<out>/verify`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build a piracy / independent zoo under one removal attack.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// `none`, `prune:RATE`, `overwrite` or `finetune-prune:EPOCHS:RATE`.
        #[arg(long, value_parser = parse_attack)]
        attack: AttackSchedule,
        #[arg(long, value_enum, default_value = "fix")]
        scenario: ScenarioArg,
    },
    /// Full pipeline, or a λ/ε sweep with `--sweep`.
    Experiment {
        #[arg(long)]
        sweep: bool,
    },
    /// Print the effective configuration.
    PrintConfig,
}

fn parse_attack(s: &str) -> Result<AttackSchedule, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| t.parse::<f64>().map_err(|e| format!("bad number `{t}`: {e}"));
    let a = match parts.as_slice() {
        ["none"] => AttackSchedule::None,
        ["overwrite"] => AttackSchedule::Overwrite,
        ["prune", r] => AttackSchedule::Prune { rate: num(r)? },
        ["finetune-prune", e, r] => AttackSchedule::FinetuneThenPrune {
            epochs: e.parse().map_err(|e| format!("bad epoch count: {e}"))?,
            rate: num(r)?,
        },
        _ => return Err(format!("unknown attack `{s}`")),
    };
    a.validate().map_err(|e| e.to_string())?;
    Ok(a)
}

fn scenario(s: ScenarioArg) -> Scenario {
    match s {
        ScenarioArg::Fix => Scenario::Fix,
        ScenarioArg::Finetune => Scenario::Finetune,
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path, Failure> {
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    Ok(&cfg.output_dir)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let cfg = load_config(&cli)?;
    let jobs = cli.jobs;
    match cli.command {
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
        }
        Command::Keygen => {
            let dir = out_dir(&cfg)?;
            let mut log = RunLog::open(dir.join("log.jsonl"))?;
            let data = cfg.dataset()?;
            let icfg = cfg.injection_config();
            let key_seed = derive_seed(cfg.seed, stream::KEY);
            let key = build_key(&icfg, &feature_moments(&data)?, Some(&data), key_seed, &mut rng_from(key_seed))?;
            if key.is_empty() {
                warn!("writing an empty key");
            }
            let path = dir.join("key.jsonl");
            save_key(&key, &path)?;
            log.record("keygen", json!({"path": path, "pairs": key.len(), "size_a": key.meta.size_a, "size_b": key.meta.size_b}))?;
            println!(
                "wrote {} pairs ({} and {} nodes) to {}",
                key.len(),
                key.meta.size_a,
                key.meta.size_b,
                path.display()
            );
        }
        Command::Pretrain => {
            let dir = out_dir(&cfg)?;
            let mut log = RunLog::open(dir.join("log.jsonl"))?;
            let data = cfg.dataset()?;
            let (encoder, curve) = pretrain_with_curve(&data, &cfg.pretrain_config())?;
            log.curve("pretrain", &curve)?;
            write_curve_csv(dir.join("pretrain_curve.csv"), &curve)?;
            let path = dir.join("pretrain.ckpt.json");
            save_checkpoint(
                &Checkpoint {
                    tag: "pretrain".into(),
                    encoder,
                    head: None,
                },
                &path,
            )?;
            println!("wrote {}", path.display());
        }
        Command::Inject => {
            let dir = out_dir(&cfg)?;
            let mut log = RunLog::open(dir.join("log.jsonl"))?;
            let data = cfg.dataset()?;
            let icfg = cfg.injection_config();
            let inj = inject(&data, &icfg)?;
            log.curve("inject", &inj.curve)?;
            log.record(
                "injected",
                json!({"initial_watermark_loss": inj.initial_watermark_loss, "final_watermark_loss": inj.final_watermark_loss}),
            )?;
            let tag = format!("watermarked-{}", icfg.ablation.tag());
            let path = dir.join(format!("{tag}.ckpt.json"));
            save_checkpoint(
                &Checkpoint {
                    tag,
                    encoder: inj.encoder,
                    head: None,
                },
                &path,
            )?;
            save_key(&inj.key, dir.join("key.jsonl"))?;
            write_curve_csv(dir.join("inject_curve.csv"), &inj.curve)?;
            println!(
                "wrote {}; watermark loss {:.4} -> {:.4}",
                path.display(),
                inj.initial_watermark_loss,
                inj.final_watermark_loss
            );
        }
        Command::Downstream {
            checkpoint,
            scenario: sc,
            kind,
            id,
        } => {
            let dir = out_dir(&cfg)?;
            let mut log = RunLog::open(dir.join("log.jsonl"))?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = cfg.dataset()?;
            let mut dcfg = cfg.downstream.clone();
            dcfg.seed = cfg.seed;
            if let Some(s) = sc {
                dcfg.scenario = scenario(s);
            }
            let provenance = match kind {
                KindArg::Piracy => Provenance::Piracy,
                KindArg::Independent => Provenance::Independent,
                KindArg::Unknown => Provenance::Unknown,
            };
            let out = train_downstream(&ckpt.encoder, &data, &dcfg, id.clone(), provenance)?;
            let path = dir.join(format!("{id}.model.json"));
            save_model(&out.model, &path)?;
            log.record("downstream", json!({"model": id, "scenario": dcfg.scenario.as_str(), "accuracy": out.accuracy}))?;
            println!("wrote {}; held-out accuracy {:?}", path.display(), out.accuracy);
        }
        Command::Verify { key, models, report } => {
            let dir = out_dir(&cfg)?;
            let mut log = RunLog::open(dir.join("log.jsonl"))?;
            let key = load_key(&key).map_err(|e| Failure::Runtime(format!("cannot load key {}: {e}", key.display())))?;
            let mut reports = Vec::new();
            for m in &models {
                let model = load_model(m)?;
                let r = ip_score(&model, &key)?;
                if r.degenerate {
                    warn!("{}: {DEGENERATE_CAVEAT}", r.model_id);
                }
                println!("{} {} ip_score {}", r.model_id, r.provenance.as_str(), r.ip_score);
                reports.push(r);
            }
            let stem = report.unwrap_or_else(|| dir.join("verify"));
            let accs = vec![None; reports.len()];
            let mut w = fs::File::create(stem.with_extension("models.jsonl")).map_err(Error::from)?;
            write_model_records(&mut w, &reports, &accs)?;
            let mut w = fs::File::create(stem.with_extension("models.csv")).map_err(Error::from)?;
            write_csv(&mut w, &reports, &accs)?;
            match summarize(&reports, &accs) {
                Ok(s) => {
                    println!("ip_gap {} ip_roc {}", s.ip_gap, s.ip_roc);
                    let text = serde_json::to_string(&s).map_err(|e| Failure::Runtime(e.to_string()))?;
                    fs::write(stem.with_extension("summary.json"), text + "\n").map_err(Error::from)?;
                    log.record("verify", json!({"models": reports.len(), "summary": s}))?;
                }
                Err(_) => {
                    info!("no summary: needs at least one piracy and one independent model");
                    log.record("verify", json!({"models": reports.len()}))?;
                }
            }
        }
        Command::Attack {
            checkpoint,
            key,
            attack,
            scenario: sc,
        } => {
            let dir = out_dir(&cfg)?;
            let mut log = RunLog::open(dir.join("log.jsonl"))?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let key = load_key(&key).map_err(|e| Failure::Runtime(format!("cannot load key {}: {e}", key.display())))?;
            let data = cfg.dataset()?;
            let spec = cfg.zoo_spec(scenario(sc), attack);
            let inds = independent_encoders(&data, &cfg.pretrain_config(), spec.n_independent, cfg.seed, jobs)?;
            let trained = train_independents(&inds, &spec, &data, jobs)?;
            let zoo = build_zoo_against(&ckpt.encoder, &key, &trained, &spec, &data, jobs)?;
            let name = format!("attack_{}_{}", spec.downstream.scenario.as_str(), attack.tag());
            write_zoo_reports(dir, &name, &zoo)?;
            log.record("zoo", json!({"name": name, "summary": zoo.summary}))?;
            println!("{name}: ip_gap {} ip_roc {}", zoo.summary.ip_gap, zoo.summary.ip_roc);
        }
        Command::Experiment { sweep } => {
            let dir = out_dir(&cfg)?.to_path_buf();
            fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(Error::from)?;
            let mut art = Artifacts::in_dir(&dir)?;
            if sweep {
                let rows = run_sweep(&cfg, jobs, &mut art)?;
                for r in rows {
                    println!("{} {} ip_gap {:.3} ip_roc {:.3}", r.scenario, r.method, r.ip_gap, r.ip_roc);
                }
            } else {
                let outcome = run_experiment(&cfg, jobs, &mut art)?;
                println!("scenario,method,attack,accuracy,ip_gap,ip_roc");
                for r in &outcome.rows {
                    let acc = match (r.accuracy_mean, r.accuracy_std) {
                        (Some(m), Some(s)) => format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s),
                        _ => "-".into(),
                    };
                    println!("{},{},{},{},{:.3},{:.3}", r.scenario, r.method, r.attack, acc, r.ip_gap, r.ip_roc);
                }
            }
        }
    }
    Ok(())
}
