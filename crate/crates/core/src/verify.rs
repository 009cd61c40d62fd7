//! Black-box ownership verification and Lipschitz consistency certificates.

use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_many, lipschitz_bound, predict_class, predict_logits, ClassifierParams, EncoderParams, ParamSet};
use crate::error::{invalid, Result};
use crate::graphs::Graph;
use crate::rng::Rng;
use crate::watermark::WatermarkKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Piracy,
    Independent,
    Unknown,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Piracy => "piracy",
            Provenance::Independent => "independent",
            Provenance::Unknown => "unknown",
        }
    }
}

/// Encoder plus downstream head under suspicion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspectModel {
    pub id: String,
    pub encoder: EncoderParams,
    pub head: ClassifierParams,
    pub provenance: Provenance,
}

impl SuspectModel {
    pub fn new(id: impl Into<String>, encoder: EncoderParams, head: ClassifierParams, provenance: Provenance) -> Result<Self> {
        if head.input_dim() != encoder.output_dim() {
            return Err(invalid(format!(
                "head input dim {} does not match encoder output dim {}",
                head.input_dim(),
                encoder.output_dim()
            )));
        }
        Ok(Self {
            id: id.into(),
            encoder,
            head,
            provenance,
        })
    }

    /// Predicted classes only — the black-box interface.
    pub fn predict(&self, graphs: &[&Graph]) -> Result<Vec<usize>> {
        let owned: Vec<Graph> = graphs.iter().map(|g| (*g).clone()).collect();
        let emb = encode_many(&owned, &self.encoder)?;
        (0..emb.rows()).map(|r| predict_class(emb.row(r), &self.head)).collect()
    }
}

pub fn save_model(model: &SuspectModel, path: impl AsRef<std::path::Path>) -> Result<()> {
    let text = serde_json::to_string(model).map_err(std::io::Error::from)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_model(path: impl AsRef<std::path::Path>) -> Result<SuspectModel> {
    let text = std::fs::read_to_string(path)?;
    let m: SuspectModel = serde_json::from_str(&text).map_err(|e| crate::error::Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    m.head.validate()?;
    SuspectModel::new(m.id, m.encoder, m.head, m.provenance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub model_id: String,
    pub provenance: Provenance,
    pub ip_score: f64,
    pub matches: Vec<bool>,
    /// Set when every key graph received the same class, in which case a
    /// high score says nothing about ownership.
    pub degenerate: bool,
}

/// Fraction of key pairs receiving equal predicted classes.
pub fn ip_score(model: &SuspectModel, key: &WatermarkKey) -> Result<VerificationReport> {
    if key.is_empty() {
        return Err(invalid("cannot score an empty key"));
    }
    if key.feature_dim() != model.encoder.input_dim() {
        return Err(invalid(format!(
            "key feature dim {} does not match model input dim {}",
            key.feature_dim(),
            model.encoder.input_dim()
        )));
    }
    let preds = model.predict(&key.graphs())?;
    let k = key.len();
    let matches: Vec<bool> = (0..k).map(|i| preds[i] == preds[k + i]).collect();
    Ok(VerificationReport {
        model_id: model.id.clone(),
        provenance: model.provenance,
        ip_score: score_from_matches(&matches),
        degenerate: preds.iter().all(|&p| p == preds[0]),
        matches,
    })
}

pub fn score_from_matches(matches: &[bool]) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    matches.iter().filter(|&&m| m).count() as f64 / matches.len() as f64
}

pub fn ip_gap(score_piracy: f64, score_independent: f64) -> f64 {
    (score_piracy - score_independent).abs()
}

/// `P(piracy > independent) + ½·P(equal)` over all cross pairs.
pub fn ip_roc(piracy: &[f64], independent: &[f64]) -> Result<f64> {
    if piracy.is_empty() || independent.is_empty() {
        return Err(invalid("IP ROC needs at least one score of each kind"));
    }
    // counted in half-units so the sum stays exact
    let mut halves: u64 = 0;
    for p in piracy {
        for q in independent {
            halves += if p > q {
                2
            } else if p == q {
                1
            } else {
                0
            };
        }
    }
    Ok(halves as f64 / (2 * piracy.len() * independent.len()) as f64)
}

/// Verdict for one score against a pool of independent scores: suspect when
/// it reaches the pool mean plus three standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub threshold: f64,
    pub piracy_suspect: bool,
}

pub fn three_sigma_verdict(score: f64, independent_pool: &[f64]) -> Result<Verdict> {
    if independent_pool.is_empty() {
        return Err(invalid("verdict needs a non-empty independent pool"));
    }
    let (mean, std) = mean_std(independent_pool);
    let threshold = mean + 3.0 * std;
    Ok(Verdict {
        threshold,
        piracy_suspect: score >= threshold,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    /// Top-1 minus top-2 logit on graph `a`.
    pub margin: f64,
    pub lipschitz: f64,
    pub distance: f64,
    /// `margin / (2·lipschitz)`; zero when the bound is undefined.
    pub bound: f64,
    pub certified: bool,
    pub reason: Option<String>,
    /// Perturbed check only: budget, margin used and largest distance found.
    pub epsilon: Option<f64>,
    pub margin_lower: Option<f64>,
    pub empirical_sup: Option<f64>,
}

/// Top-1 minus top-2 logit (infinite for a single class).
pub fn logit_margin(logits: &[f64]) -> f64 {
    if logits.len() < 2 {
        return f64::INFINITY;
    }
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[0] - sorted[1]
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Certificate for given embeddings: equal classes are guaranteed when
/// `‖e_a − e_b‖ < margin(e_a) / (2·L)`.
pub fn certify_embeddings(head: &ClassifierParams, ea: &[f64], eb: &[f64]) -> Result<CertificateReport> {
    let logits = predict_logits(ea, head)?;
    if eb.len() != ea.len() {
        return Err(invalid("embedding dims differ"));
    }
    let margin = logit_margin(&logits);
    let lipschitz = lipschitz_bound(head);
    let dist = distance(ea, eb);
    let (bound, certified, reason) = if lipschitz == 0.0 {
        (0.0, false, Some("Lipschitz product is zero; bound undefined".to_string()))
    } else if !margin.is_finite() {
        (f64::INFINITY, true, Some("single-class head".to_string()))
    } else {
        let bound = margin / (2.0 * lipschitz);
        (bound, dist < bound, None)
    };
    Ok(CertificateReport {
        margin,
        lipschitz,
        distance: dist,
        bound,
        certified,
        reason,
        epsilon: None,
        margin_lower: None,
        empirical_sup: None,
    })
}

fn embed_pair(encoder: &EncoderParams, pair: (&Graph, &Graph)) -> Result<(Vec<f64>, Vec<f64>)> {
    let emb = encode_many(&[pair.0.clone(), pair.1.clone()], encoder)?;
    Ok((emb.row(0).to_vec(), emb.row(1).to_vec()))
}

pub fn certify_pair(encoder: &EncoderParams, head: &ClassifierParams, pair: (&Graph, &Graph)) -> Result<CertificateReport> {
    let (ea, eb) = embed_pair(encoder, pair)?;
    certify_embeddings(head, &ea, &eb)
}

/// Empirical check of the perturbed certificate: the largest pair distance
/// found over random directions of norm `eps` and a projected ascent on the
/// distance itself, compared with `margin_lower / (2·L)`. The search only
/// bounds the true supremum from below, so the verdict is heuristic.
pub fn certify_pair_perturbed(
    encoder: &EncoderParams,
    head: &ClassifierParams,
    pair: (&Graph, &Graph),
    eps: f64,
    num_dirs: usize,
    margin_lower: Option<f64>,
    rng: &mut Rng,
) -> Result<CertificateReport> {
    if !(eps >= 0.0) || num_dirs == 0 {
        return Err(invalid("need eps ≥ 0 and at least one direction"));
    }
    let mut report = certify_pair(encoder, head, pair)?;
    let lower = margin_lower.unwrap_or(report.margin);
    let theta = encoder.flatten();
    let dist_at = |delta: &[f64]| -> Result<f64> {
        let (ea, eb) = embed_pair(&encoder.shifted(delta), pair)?;
        Ok(distance(&ea, &eb))
    };
    let mut sup = report.distance;
    if eps > 0.0 && !theta.is_empty() {
        let random = random_direction_sup(&theta, eps, num_dirs, &dist_at, rng)?;
        let pgd = pgd_sup(encoder, pair, eps, num_dirs.max(1), rng)?;
        sup = sup.max(random).max(pgd);
    }
    let lipschitz = report.lipschitz;
    let bound = if lipschitz == 0.0 { 0.0 } else { lower / (2.0 * lipschitz) };
    report.bound = bound;
    report.certified = lipschitz > 0.0 && sup < bound;
    report.epsilon = Some(eps);
    report.margin_lower = Some(lower);
    report.empirical_sup = Some(sup);
    if margin_lower.is_none() {
        report.reason = Some("lower margin assumed equal to the unperturbed margin".into());
    }
    Ok(report)
}

fn unit_direction(n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn random_direction_sup(
    theta: &[f64],
    eps: f64,
    num_dirs: usize,
    dist_at: &dyn Fn(&[f64]) -> Result<f64>,
    rng: &mut Rng,
) -> Result<f64> {
    let mut best = 0.0_f64;
    for _ in 0..num_dirs {
        let r: f64 = rng.random_range(0.0..=1.0);
        let d: Vec<f64> = unit_direction(theta.len(), rng).into_iter().map(|x| x * eps * r.max(0.5)).collect();
        best = best.max(dist_at(&d)?);
        let full: Vec<f64> = d.iter().map(|x| x / r.max(0.5)).collect();
        best = best.max(dist_at(&full)?);
    }
    Ok(best)
}

/// Projected gradient ascent on `‖f(a; θ+δ) − f(b; θ+δ)‖²` inside the ball.
pub fn pgd_sup(encoder: &EncoderParams, pair: (&Graph, &Graph), eps: f64, steps: usize, rng: &mut Rng) -> Result<f64> {
    use crate::autodiff::Tape;
    use crate::encoder::{BoundParams, GraphBatch};
    let n = encoder.num_params();
    let mut delta: Vec<f64> = unit_direction(n, rng).into_iter().map(|x| x * eps * 1e-3).collect();
    let batch = GraphBatch::new([pair.0, pair.1])?;
    let mut best = 0.0_f64;
    for _ in 0..steps {
        let p = encoder.shifted(&delta);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, true);
        let h = vars.embed(&mut tape, &batch)?;
        let a = tape.slice_rows(h, 0, 1)?;
        let b = tape.slice_rows(h, 1, 2)?;
        let diff = tape.sub(a, b)?;
        let loss = tape.l2_norm_sq(diff);
        best = best.max(tape.value(loss).item().sqrt());
        let g = vars.flat_grad(&tape.backward(loss)?);
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gn == 0.0 {
            break;
        }
        let step = eps / (steps as f64).sqrt().max(1.0);
        delta.iter_mut().zip(&g).for_each(|(d, g)| *d += step * g / gn);
        crate::watermark::project_to_ball(&mut delta, eps);
    }
    let (ea, eb) = embed_pair(&encoder.shifted(&delta), pair)?;
    Ok(best.max(distance(&ea, &eb)))
}

/// One JSON line per model.
pub fn write_model_records(w: &mut impl Write, reports: &[VerificationReport], accuracy: &[Option<f64>]) -> Result<()> {
    #[derive(Serialize)]
    struct Record<'a> {
        model_id: &'a str,
        kind: &'a str,
        ip_score: f64,
        accuracy: Option<f64>,
        degenerate: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        caveat: Option<&'static str>,
    }
    for (i, r) in reports.iter().enumerate() {
        let rec = Record {
            model_id: &r.model_id,
            kind: r.provenance.as_str(),
            ip_score: r.ip_score,
            accuracy: accuracy.get(i).copied().flatten(),
            degenerate: r.degenerate,
            caveat: r.degenerate.then_some(DEGENERATE_CAVEAT),
        };
        serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub const DEGENERATE_CAVEAT: &str =
    "model predicts a single class on every key graph; its IP score is uninformative";

/// `model_id,kind,ip_score,accuracy` table.
pub fn write_csv(w: &mut impl Write, reports: &[VerificationReport], accuracy: &[Option<f64>]) -> Result<()> {
    writeln!(w, "model_id,kind,ip_score,accuracy")?;
    for (i, r) in reports.iter().enumerate() {
        let acc = accuracy.get(i).copied().flatten().map_or(String::new(), |a| format!("{a}"));
        writeln!(w, "{},{},{},{}", r.model_id, r.provenance.as_str(), r.ip_score, acc)?;
    }
    Ok(())
}

/// Aggregate over a population of piracy and independent models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub ip_gap: f64,
    pub ip_roc: f64,
    pub piracy_mean: f64,
    pub independent_mean: f64,
    pub piracy_accuracy_mean: Option<f64>,
    pub piracy_accuracy_std: Option<f64>,
    pub independent_accuracy_mean: Option<f64>,
    pub independent_accuracy_std: Option<f64>,
}

/// Gap between mean scores, ROC, and accuracy statistics of both groups.
pub fn summarize(reports: &[VerificationReport], accuracy: &[Option<f64>]) -> Result<SummaryRecord> {
    let pick = |kind: Provenance| -> (Vec<f64>, Vec<f64>) {
        let mut scores = Vec::new();
        let mut accs = Vec::new();
        for (i, r) in reports.iter().enumerate() {
            if r.provenance == kind {
                scores.push(r.ip_score);
                if let Some(a) = accuracy.get(i).copied().flatten() {
                    accs.push(a);
                }
            }
        }
        (scores, accs)
    };
    let (pir, pir_acc) = pick(Provenance::Piracy);
    let (ind, ind_acc) = pick(Provenance::Independent);
    let roc = ip_roc(&pir, &ind)?;
    let (pm, _) = mean_std(&pir);
    let (im, _) = mean_std(&ind);
    let stats = |a: &[f64]| if a.is_empty() { (None, None) } else { let (m, s) = mean_std(a); (Some(m), Some(s)) };
    let (pam, pas) = stats(&pir_acc);
    let (iam, ias) = stats(&ind_acc);
    Ok(SummaryRecord {
        ip_gap: ip_gap(pm, im),
        ip_roc: roc,
        piracy_mean: pm,
        independent_mean: im,
        piracy_accuracy_mean: pam,
        piracy_accuracy_std: pas,
        independent_accuracy_mean: iam,
        independent_accuracy_std: ias,
    })
}
