use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{sample_er_graph, Dataset, FeatureMoments};
use crate::error::{invalid, Result};
use crate::rng::Rng;

/// Labeled synthetic benchmark: class `k` graphs are ER with edge
/// probability `densities[k]` and features `N(shifts[k], I)`.
///
/// Classes with identical density and shift are indistinguishable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub num_graphs: usize,
    pub feature_dim: usize,
    pub class_count: usize,
    /// Inclusive node-count range.
    pub size_range: (usize, usize),
    pub densities: Vec<f64>,
    pub shifts: Vec<f64>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            num_graphs: 400,
            feature_dim: 8,
            class_count: 2,
            size_range: (10, 24),
            densities: vec![0.15, 0.3],
            shifts: vec![0.0, 0.5],
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(invalid("class_count must be at least 1"));
        }
        if self.densities.len() != self.class_count || self.shifts.len() != self.class_count {
            return Err(invalid("densities and shifts need one entry per class"));
        }
        if self.densities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("densities must lie in [0, 1]"));
        }
        let (lo, hi) = self.size_range;
        if lo == 0 || lo > hi {
            return Err(invalid(format!("bad size range ({lo}, {hi})")));
        }
        if self.feature_dim == 0 {
            return Err(invalid("feature_dim must be positive"));
        }
        Ok(())
    }
}

pub fn synth_benchmark(spec: &BenchmarkSpec, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    let (lo, hi) = spec.size_range;
    let mut graphs = Vec::with_capacity(spec.num_graphs);
    for i in 0..spec.num_graphs {
        let class = i % spec.class_count;
        let moments = FeatureMoments {
            mu: vec![spec.shifts[class]; spec.feature_dim],
            sigma: vec![1.0; spec.feature_dim],
        };
        let n = rng.random_range(lo..=hi);
        let g = sample_er_graph(format!("g{i}"), n, spec.densities[class], &moments, rng)?;
        graphs.push(g.with_label(Some(class)));
    }
    Dataset::new(graphs, spec.feature_dim, Some(spec.class_count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn empty_benchmark() {
        let spec = BenchmarkSpec {
            num_graphs: 0,
            ..Default::default()
        };
        let ds = synth_benchmark(&spec, &mut rng_from(1)).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.num_classes(), Some(2));
    }

    #[test]
    fn balanced_labels_and_sizes() {
        let spec = BenchmarkSpec::default();
        let ds = synth_benchmark(&spec, &mut rng_from(2)).unwrap();
        assert_eq!(ds.len(), 400);
        let ones = ds.graphs().iter().filter(|g| g.label() == Some(1)).count();
        assert_eq!(ones, 200);
        assert!(ds
            .graphs()
            .iter()
            .all(|g| (10..=24).contains(&g.num_nodes()) && g.feature_dim() == 8));
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = BenchmarkSpec {
            densities: vec![0.1, 1.5],
            ..Default::default()
        };
        assert!(synth_benchmark(&spec, &mut rng_from(3)).is_err());
        let spec = BenchmarkSpec {
            class_count: 3,
            ..Default::default()
        };
        assert!(synth_benchmark(&spec, &mut rng_from(3)).is_err());
    }
}
