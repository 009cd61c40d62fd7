use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BoundParams, Linear, LinearVars, ParamSet};
use crate::autodiff::{Adjacency, Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::graphs::Graph;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Mean,
    Sum,
}

/// One GIN layer: `h ← MLP((1 + eps)·h + Σ_{u∈N(v)} h_u)` with a
/// two-layer ReLU MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinLayer {
    pub mlp1: Linear,
    pub mlp2: Linear,
    /// Learnable self weight, stored as a one-element tensor.
    pub eps: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<GinLayer>,
    pub readout: Readout,
}

impl EncoderParams {
    pub fn init(input_dim: usize, hidden: usize, num_layers: usize, rng: &mut Rng) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d_in = if l == 0 { input_dim } else { hidden };
                GinLayer {
                    mlp1: Linear::init(d_in, hidden, rng),
                    mlp2: Linear::init(hidden, hidden, rng),
                    eps: Tensor::vector(vec![0.0]),
                }
            })
            .collect();
        Self {
            layers,
            readout: Readout::Mean,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.mlp1.input_dim())
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .last()
            .map_or(self.input_dim(), |l| l.mlp2.output_dim())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Mask over the flat parameter vector: `true` for weight-matrix entries,
    /// `false` for biases and the GIN self weights.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            mask.extend(std::iter::repeat_n(true, l.mlp1.weight.len()));
            mask.extend(std::iter::repeat_n(false, l.mlp1.bias.len()));
            mask.extend(std::iter::repeat_n(true, l.mlp2.weight.len()));
            mask.extend(std::iter::repeat_n(false, l.mlp2.bias.len()));
            mask.push(false);
        }
        mask
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let layers = self
            .layers
            .iter()
            .map(|l| GinLayerVars {
                mlp1: l.mlp1.bind(tape, trainable),
                mlp2: l.mlp2.bind(tape, trainable),
                eps: if trainable {
                    tape.param(l.eps.clone())
                } else {
                    tape.constant(l.eps.clone())
                },
            })
            .collect();
        EncoderVars {
            layers,
            readout: self.readout,
        }
    }
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    &l.mlp1.weight,
                    &l.mlp1.bias,
                    &l.mlp2.weight,
                    &l.mlp2.bias,
                    &l.eps,
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    &mut l.mlp1.weight,
                    &mut l.mlp1.bias,
                    &mut l.mlp2.weight,
                    &mut l.mlp2.bias,
                    &mut l.eps,
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct GinLayerVars {
    mlp1: LinearVars,
    mlp2: LinearVars,
    eps: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    layers: Vec<GinLayerVars>,
    readout: Readout,
}

impl BoundParams for EncoderVars {
    fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.mlp1.weight,
                    l.mlp1.bias,
                    l.mlp2.weight,
                    l.mlp2.bias,
                    l.eps,
                ]
            })
            .collect()
    }
}

/// Several graphs packed into one disjoint union.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    features: Tensor,
    adjacency: Arc<Adjacency>,
    offsets: Arc<Vec<usize>>,
}

impl GraphBatch {
    pub fn new<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> Result<Self> {
        let mut feats = Vec::new();
        let mut offsets = vec![0];
        let mut adj_offsets = vec![0];
        let mut neighbors = Vec::new();
        let mut dim = None;
        for g in graphs {
            let base = *offsets.last().unwrap();
            if g.num_nodes() > 0 {
                match dim {
                    None => dim = Some(g.feature_dim()),
                    Some(d) if d != g.feature_dim() => {
                        return Err(invalid(format!(
                            "graph `{}` has feature dim {}, batch has {d}",
                            g.id(),
                            g.feature_dim()
                        )))
                    }
                    _ => {}
                }
            }
            feats.extend_from_slice(g.features().values());
            for nb in g.adjacency_lists() {
                neighbors.extend(nb.into_iter().map(|u| u + base));
                adj_offsets.push(neighbors.len());
            }
            offsets.push(base + g.num_nodes());
        }
        let n = *offsets.last().unwrap();
        let d = dim.unwrap_or(0);
        Ok(Self {
            features: Tensor::matrix(n, d, feats)?,
            adjacency: Arc::new(Adjacency {
                offsets: adj_offsets,
                neighbors,
            }),
            offsets: Arc::new(offsets),
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Start offset of each graph's nodes, plus the total at the end.
    pub fn node_offsets(&self) -> &[usize] {
        &self.offsets
    }
}

impl EncoderVars {
    /// Node states after the last GIN layer, `[num_nodes, hidden]`.
    ///
    /// ReLU is applied between layers but not after the last one.
    pub fn node_states(&self, tape: &mut Tape, batch: &GraphBatch) -> Result<Var> {
        let mut h = tape.constant(batch.features.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let in_dim = tape.value(l.mlp1.weight).rows();
            if tape.value(h).cols() != in_dim && batch.num_nodes() > 0 {
                return Err(invalid(format!(
                    "layer {i} expects input dim {in_dim}, got {}",
                    tape.value(h).cols()
                )));
            }
            let agg = tape.neighbor_sum(h, batch.adjacency.clone())?;
            let one_plus = tape.add_scalar(l.eps, 1.0);
            let own = tape.scale_by(h, one_plus)?;
            let agg = tape.add(agg, own)?;
            let z = l.mlp1.apply(tape, agg)?;
            let z = tape.relu(z);
            let z = l.mlp2.apply(tape, z)?;
            h = if i + 1 < self.layers.len() {
                tape.relu(z)
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Graph embeddings `[num_graphs, hidden]`.
    pub fn embed(&self, tape: &mut Tape, batch: &GraphBatch) -> Result<Var> {
        let h = self.node_states(tape, batch)?;
        let mean = tape.segment_mean(h, batch.offsets.clone())?;
        Ok(match self.readout {
            Readout::Mean => mean,
            Readout::Sum => {
                // sum = mean · node count, per graph
                let counts: Vec<f64> = batch
                    .offsets
                    .windows(2)
                    .flat_map(|w| {
                        std::iter::repeat_n((w[1] - w[0]) as f64, tape.value(mean).cols())
                    })
                    .collect();
                let c = tape.constant(Tensor::new(tape.value(mean).shape().to_vec(), counts)?);
                tape.mul(mean, c)?
            }
        })
    }
}

/// Graph-level embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn encode(g: &Graph, params: &EncoderParams) -> Result<Embedding> {
    let t = encode_many(std::slice::from_ref(g), params)?;
    Ok(Embedding(t.into_values()))
}

/// Embeddings of several graphs as a `[len, hidden]` matrix.
/// A zero-layer encoder is a plain readout of the raw features.
pub fn encode_many(graphs: &[Graph], params: &EncoderParams) -> Result<Tensor> {
    let checked = !params.layers.is_empty();
    if let Some(g) = graphs.iter().find(|g| checked && g.num_nodes() > 0 && g.feature_dim() != params.input_dim()) {
        return Err(invalid(format!(
            "graph `{}` feature dim {} does not match encoder input dim {}",
            g.id(),
            g.feature_dim(),
            params.input_dim()
        )));
    }
    let batch = GraphBatch::new(graphs)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let out = vars.embed(&mut tape, &batch)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Linear;
    use crate::graphs::{sample_er_graph, FeatureMoments};
    use crate::rng::rng_from;
    use rand::seq::SliceRandom;

    fn identity_encoder(dim: usize, layers: usize) -> EncoderParams {
        EncoderParams {
            layers: (0..layers)
                .map(|_| GinLayer {
                    mlp1: Linear::identity(dim),
                    mlp2: Linear::identity(dim),
                    eps: Tensor::vector(vec![0.0]),
                })
                .collect(),
            readout: Readout::Mean,
        }
    }

    #[test]
    fn single_node_is_mlp_of_features() {
        let g = Graph::new("s", 1, [], Tensor::matrix(1, 3, vec![0.5, 2.0, 1.0]).unwrap(), None)
            .unwrap();
        let e = encode(&g, &identity_encoder(3, 1)).unwrap();
        assert_eq!(e.0, vec![0.5, 2.0, 1.0]);
    }

    #[test]
    fn triangle_all_ones() {
        let g = Graph::new("t", 3, [(0, 1), (1, 2), (0, 2)], Tensor::matrix(3, 2, vec![1.0; 6]).unwrap(), None)
            .unwrap();
        let e = encode(&g, &identity_encoder(2, 1)).unwrap();
        assert_eq!(e.0, vec![3.0, 3.0]);
    }

    #[test]
    fn sum_readout_scales_by_size() {
        let g = Graph::new("t", 3, [(0, 1), (1, 2), (0, 2)], Tensor::matrix(3, 2, vec![1.0; 6]).unwrap(), None)
            .unwrap();
        let mut p = identity_encoder(2, 1);
        p.readout = Readout::Sum;
        assert_eq!(encode(&g, &p).unwrap().0, vec![9.0, 9.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let g = Graph::new("s", 1, [], Tensor::zeros(&[1, 4]), None).unwrap();
        assert!(encode(&g, &identity_encoder(3, 1)).is_err());
    }

    #[test]
    fn batch_matches_individual() {
        let mut rng = rng_from(1);
        let m = FeatureMoments { mu: vec![0.0; 4], sigma: vec![1.0; 4] };
        let graphs: Vec<Graph> = (0..6)
            .map(|i| sample_er_graph(format!("g{i}"), 3 + i, 0.4, &m, &mut rng).unwrap())
            .collect();
        let p = EncoderParams::init(4, 8, 2, &mut rng);
        let all = encode_many(&graphs, &p).unwrap();
        for (i, g) in graphs.iter().enumerate() {
            let e = encode(g, &p).unwrap();
            for (a, b) in e.0.iter().zip(all.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = rng_from(2);
        let m = FeatureMoments { mu: vec![0.5; 3], sigma: vec![1.0; 3] };
        let p = EncoderParams::init(3, 16, 2, &mut rng);
        for i in 0..100 {
            let n = 2 + i % 20;
            let g = sample_er_graph("g", n, 0.3, &m, &mut rng).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let a = encode(&g, &p).unwrap();
            let b = encode(&g.permute(&perm).unwrap(), &p).unwrap();
            assert!(a.distance(&b) < 1e-9);
        }
    }

    #[test]
    fn weight_mask_covers_params() {
        let p = EncoderParams::init(3, 5, 2, &mut rng_from(3));
        let mask = p.weight_mask();
        assert_eq!(mask.len(), p.num_params());
        assert_eq!(mask.iter().filter(|m| **m).count(), 3 * 5 + 5 * 5 + 5 * 5 + 5 * 5);
    }
}
