use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{Ablation, InjectionConfig};
use crate::error::{invalid, Error, Result};
use crate::graphs::{parse_graph_record, sample_er_graph, write_graph_record, Dataset, FeatureMoments, Graph, GraphRecord};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySource {
    ErdosRenyi,
    RealGraphs,
}

/// How a key was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyMetadata {
    pub source: KeySource,
    pub feature_dim: usize,
    pub edge_prob_a: f64,
    pub edge_prob_b: f64,
    pub size_a: usize,
    pub size_b: usize,
    pub seed: Option<u64>,
    pub moments: Option<FeatureMoments>,
}

/// Ordered secret pairs `(a, b)` whose embeddings the owner pulls together.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkKey {
    pub pairs: Vec<(Graph, Graph)>,
    pub meta: KeyMetadata,
}

impl WatermarkKey {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.meta.feature_dim
    }

    /// All `a` graphs, then all `b` graphs.
    pub fn graphs(&self) -> Vec<&Graph> {
        self.pairs
            .iter()
            .map(|(a, _)| a)
            .chain(self.pairs.iter().map(|(_, b)| b))
            .collect()
    }
}

/// Samples the key: `num_pairs` pairs of independent random graphs whose
/// sizes differ by `node_count_delta`, features drawn from `moments`.
/// With [`Ablation::RealGraphKeys`], pairs of distinct real graphs are drawn
/// from `dataset` instead.
pub fn build_key(
    cfg: &InjectionConfig,
    moments: &FeatureMoments,
    dataset: Option<&Dataset>,
    seed: u64,
    rng: &mut Rng,
) -> Result<WatermarkKey> {
    if cfg.base_node_count < 2 {
        return Err(invalid("base_node_count must be at least 2"));
    }
    let k = cfg.num_pairs;
    if cfg.ablation == Ablation::RealGraphKeys {
        let data = dataset.ok_or_else(|| invalid("real-graph keys need the pretraining dataset"))?;
        if data.len() < 2 * k {
            return Err(invalid(format!(
                "real-graph keys need {} graphs, dataset has {}",
                2 * k,
                data.len()
            )));
        }
        let picked = index::sample(rng, data.len(), 2 * k).into_vec();
        let pairs = picked
            .chunks(2)
            .enumerate()
            .map(|(i, c)| {
                let a = data.graphs()[c[0]].clone().with_id(format!("wm{i}a")).with_label(None);
                let b = data.graphs()[c[1]].clone().with_id(format!("wm{i}b")).with_label(None);
                (a, b)
            })
            .collect();
        return Ok(WatermarkKey {
            pairs,
            meta: KeyMetadata {
                source: KeySource::RealGraphs,
                feature_dim: data.feature_dim(),
                edge_prob_a: 0.0,
                edge_prob_b: 0.0,
                size_a: 0,
                size_b: 0,
                seed: Some(seed),
                moments: None,
            },
        });
    }
    if k == 0 {
        warn!("watermark key with zero pairs");
    }
    let (pa, pb) = (cfg.edge_prob, cfg.edge_prob_b.unwrap_or(cfg.edge_prob));
    let (na, nb) = (cfg.base_node_count, cfg.base_node_count + cfg.node_count_delta);
    let mut pairs = Vec::with_capacity(k);
    for i in 0..k {
        let a = sample_er_graph(format!("wm{i}a"), na, pa, moments, rng)?;
        let b = sample_er_graph(format!("wm{i}b"), nb, pb, moments, rng)?;
        pairs.push((a, b));
    }
    Ok(WatermarkKey {
        pairs,
        meta: KeyMetadata {
            source: KeySource::ErdosRenyi,
            feature_dim: moments.dim(),
            edge_prob_a: pa,
            edge_prob_b: pb,
            size_a: na,
            size_b: nb,
            seed: Some(seed),
            moments: Some(moments.clone()),
        },
    })
}

#[derive(Serialize, Deserialize)]
struct KeyHeader {
    watermark_key: KeyMetadata,
    num_pairs: usize,
}

/// Writes a metadata header line followed by one graph record per key graph,
/// tagged with its pair index and role.
pub fn save_key(key: &WatermarkKey, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = KeyHeader {
        watermark_key: key.meta.clone(),
        num_pairs: key.len(),
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for (i, (a, b)) in key.pairs.iter().enumerate() {
        for (g, role) in [(a, "a"), (b, "b")] {
            let mut rec = GraphRecord::from_graph(g);
            rec.pair = Some(i);
            rec.role = Some(role.to_string());
            write_graph_record(&mut w, &rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_key(path: impl AsRef<Path>) -> Result<WatermarkKey> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 0,
        msg: "empty key file".into(),
    })?;
    let header: KeyHeader = serde_json::from_str(&first?).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("key header: {e}"),
    })?;
    let dim = header.watermark_key.feature_dim;
    let mut slots: Vec<(Option<Graph>, Option<Graph>)> = vec![(None, None); header.num_pairs];
    for (i, line) in lines {
        let line_no = i + 1;
        let rec = parse_graph_record(&line?, line_no)?;
        let perr = |msg: String| Error::Parse { line: line_no, msg };
        let pair = rec.pair.ok_or_else(|| perr("record has no pair index".into()))?;
        let slot = slots
            .get_mut(pair)
            .ok_or_else(|| perr(format!("pair index {pair} beyond header count")))?;
        let g = rec.to_graph(dim).map_err(|e| perr(e.to_string()))?;
        if g.num_nodes() > 0 && g.feature_dim() != dim {
            return Err(perr(format!("feature dim {} differs from header {dim}", g.feature_dim())));
        }
        let target = match rec.role.as_deref() {
            Some("a") => &mut slot.0,
            Some("b") => &mut slot.1,
            other => return Err(perr(format!("unknown role {other:?}"))),
        };
        if target.replace(g).is_some() {
            return Err(perr(format!("duplicate graph for pair {pair}")));
        }
    }
    let pairs = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| match s {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Parse {
                line: 0,
                msg: format!("pair {i} is incomplete"),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WatermarkKey {
        pairs,
        meta: header.watermark_key,
    })
}
