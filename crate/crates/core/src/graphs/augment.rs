use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::autodiff::Tensor;
use crate::error::{invalid, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    /// Remove `⌊ratio·n⌋` nodes (at most `n − 1`) with their incident edges.
    NodeDrop,
    /// Remove `⌊ratio·|E|⌋` edges and add as many previously absent ones.
    EdgePerturb,
}

/// One stochastic view of `g`.
pub fn augment(g: &Graph, kind: AugmentKind, ratio: f64, rng: &mut Rng) -> Result<Graph> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid(format!("augmentation ratio {ratio} outside [0, 1)")));
    }
    if g.num_nodes() < 2 {
        return Err(invalid(format!(
            "augmentation needs at least 2 nodes, graph `{}` has {}",
            g.id(),
            g.num_nodes()
        )));
    }
    match kind {
        AugmentKind::NodeDrop => node_drop(g, ratio, rng),
        AugmentKind::EdgePerturb => edge_perturb(g, ratio, rng),
    }
}

fn node_drop(g: &Graph, ratio: f64, rng: &mut Rng) -> Result<Graph> {
    let n = g.num_nodes();
    let k = ((ratio * n as f64).floor() as usize).min(n - 1);
    if k == 0 {
        return Ok(g.clone());
    }
    let mut keep = vec![true; n];
    for i in sample(rng, n, k) {
        keep[i] = false;
    }
    let mut new_index = vec![usize::MAX; n];
    let mut next = 0;
    let d = g.feature_dim();
    let mut feats = Vec::with_capacity((n - k) * d);
    for v in 0..n {
        if keep[v] {
            new_index[v] = next;
            next += 1;
            feats.extend_from_slice(g.features().row(v));
        }
    }
    let edges = g
        .edges()
        .iter()
        .filter(|(u, v)| keep[*u] && keep[*v])
        .map(|&(u, v)| (new_index[u], new_index[v]));
    Graph::new(g.id(), next, edges, Tensor::matrix(next, d, feats)?, g.label())
}

fn edge_perturb(g: &Graph, ratio: f64, rng: &mut Rng) -> Result<Graph> {
    let m = g.num_edges();
    let k = (ratio * m as f64).floor() as usize;
    if k == 0 {
        return Ok(g.clone());
    }
    let absent = g.absent_pairs();
    let mut keep = vec![true; m];
    for i in sample(rng, m, k) {
        keep[i] = false;
    }
    let mut edges: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(e, _)| *e)
        .collect();
    let add = k.min(absent.len());
    for i in sample(rng, absent.len(), add) {
        edges.push(absent[i]);
    }
    Graph::new(g.id(), g.num_nodes(), edges, g.features().clone(), g.label())
}
