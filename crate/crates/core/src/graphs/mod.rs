//! Graph data model, synthesis and persistence.

mod augment;
mod benchmark;
mod er;
mod io;

pub use augment::{augment, AugmentKind};
pub use benchmark::{synth_benchmark, BenchmarkSpec};
pub use er::sample_er_graph;
pub use io::{load_dataset, parse_graph_record, save_dataset, write_graph_record, GraphRecord};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};

/// Undirected simple graph with a dense node-feature matrix.
///
/// Edges are stored as `(u, v)` with `u < v`, sorted and deduplicated.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    id: String,
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Tensor,
    label: Option<usize>,
}

impl Graph {
    /// Builds a graph, normalizing edge orientation and order.
    ///
    /// Rejects self-loops, out-of-range endpoints and a feature matrix whose
    /// row count differs from `num_nodes`. Duplicate edges are merged.
    pub fn new(
        id: impl Into<String>,
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Tensor,
        label: Option<usize>,
    ) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != num_nodes {
            return Err(invalid(format!(
                "feature matrix {:?} does not have {num_nodes} rows",
                features.shape()
            )));
        }
        let mut norm = Vec::new();
        for (u, v) in edges {
            if u == v {
                return Err(invalid(format!("self-loop on node {u}")));
            }
            if u >= num_nodes || v >= num_nodes {
                return Err(invalid(format!(
                    "edge ({u},{v}) out of range for {num_nodes} nodes"
                )));
            }
            norm.push((u.min(v), u.max(v)));
        }
        norm.sort_unstable();
        norm.dedup();
        Ok(Self {
            id: id.into(),
            num_nodes,
            edges: norm,
            features,
            label,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    /// Neighbor lists indexed by node.
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Node pairs `(u, v)`, `u < v`, that are not edges.
    pub fn absent_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.num_nodes {
            for v in u + 1..self.num_nodes {
                if !self.has_edge(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(invalid("permutation length differs from node count"));
        }
        let d = self.feature_dim();
        let mut feats = vec![0.0; self.num_nodes * d];
        for (old, &new) in perm.iter().enumerate() {
            feats[new * d..(new + 1) * d].copy_from_slice(self.features.row(old));
        }
        Graph::new(
            self.id.clone(),
            self.num_nodes,
            self.edges.iter().map(|&(u, v)| (perm[u], perm[v])),
            Tensor::matrix(self.num_nodes, d, feats)?,
            self.label,
        )
    }
}

/// A collection of graphs sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    graphs: Vec<Graph>,
    feature_dim: usize,
    num_classes: Option<usize>,
}

impl Dataset {
    pub fn new(graphs: Vec<Graph>, feature_dim: usize, num_classes: Option<usize>) -> Result<Self> {
        for g in &graphs {
            if g.num_nodes() > 0 && g.feature_dim() != feature_dim {
                return Err(invalid(format!(
                    "graph `{}` has feature dim {}, dataset expects {feature_dim}",
                    g.id(),
                    g.feature_dim()
                )));
            }
            if let (Some(y), Some(c)) = (g.label(), num_classes) {
                if y >= c {
                    return Err(invalid(format!(
                        "graph `{}` label {y} outside [0, {c})",
                        g.id()
                    )));
                }
            }
        }
        Ok(Self {
            graphs,
            feature_dim,
            num_classes,
        })
    }

    /// Infers the feature dimension and class count from the graphs.
    pub fn from_graphs(graphs: Vec<Graph>) -> Result<Self> {
        let feature_dim = graphs
            .iter()
            .find(|g| g.num_nodes() > 0)
            .map_or(0, Graph::feature_dim);
        let num_classes = graphs.iter().filter_map(Graph::label).max().map(|m| m + 1);
        Self::new(graphs, feature_dim, num_classes)
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    /// Subset by index, keeping the metadata.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            graphs: idx.iter().map(|&i| self.graphs[i].clone()).collect(),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
        }
    }
}

/// Per-dimension mean and population standard deviation of node features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMoments {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl FeatureMoments {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Moments over all nodes of all graphs in the dataset.
pub fn feature_moments(dataset: &Dataset) -> Result<FeatureMoments> {
    let d = dataset.feature_dim();
    let total: usize = dataset.graphs().iter().map(Graph::num_nodes).sum();
    if dataset.is_empty() || total == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut mu = vec![0.0; d];
    for g in dataset.graphs() {
        for r in 0..g.num_nodes() {
            for (m, x) in mu.iter_mut().zip(g.features().row(r)) {
                *m += x;
            }
        }
    }
    mu.iter_mut().for_each(|m| *m /= total as f64);
    let mut var = vec![0.0; d];
    for g in dataset.graphs() {
        for r in 0..g.num_nodes() {
            for ((v, x), m) in var.iter_mut().zip(g.features().row(r)).zip(&mu) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let sigma = var.into_iter().map(|v| (v / total as f64).sqrt()).collect();
    Ok(FeatureMoments { mu, sigma })
}
