use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{FeatureMoments, Graph};
use crate::autodiff::Tensor;
use crate::error::{invalid, Result};
use crate::rng::Rng;

/// Erdős–Rényi graph on `n` nodes with Gaussian node features.
///
/// Each of the `n(n−1)/2` candidate edges is kept independently with
/// probability `p`; each feature row is drawn from `N(mu, diag(sigma²))`.
/// Dimensions with `sigma = 0` are the constant `mu`.
pub fn sample_er_graph(
    id: impl Into<String>,
    n: usize,
    p: f64,
    moments: &FeatureMoments,
    rng: &mut Rng,
) -> Result<Graph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("edge probability {p} outside [0, 1]")));
    }
    if n == 0 {
        return Err(invalid("ER graph needs at least one node"));
    }
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let d = moments.dim();
    let mut feats = Vec::with_capacity(n * d);
    for _ in 0..n {
        for (mu, sigma) in moments.mu.iter().zip(&moments.sigma) {
            let z: f64 = StandardNormal.sample(rng);
            feats.push(if *sigma == 0.0 { *mu } else { mu + sigma * z });
        }
    }
    Graph::new(id, n, edges, Tensor::matrix(n, d, feats)?, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};

    fn unit(d: usize) -> FeatureMoments {
        FeatureMoments {
            mu: vec![0.0; d],
            sigma: vec![1.0; d],
        }
    }

    #[test]
    fn extreme_probabilities() {
        let mut rng = rng_from(1);
        assert_eq!(sample_er_graph("g", 5, 0.0, &unit(2), &mut rng).unwrap().num_edges(), 0);
        assert_eq!(sample_er_graph("g", 4, 1.0, &unit(2), &mut rng).unwrap().num_edges(), 6);
        assert!(sample_er_graph("g", 4, 1.5, &unit(2), &mut rng).is_err());
        assert!(sample_er_graph("g", 4, -0.1, &unit(2), &mut rng).is_err());
    }

    #[test]
    fn mean_edge_count() {
        let mut rng = rng_from(2);
        let draws = 1000;
        let total: usize = (0..draws)
            .map(|_| sample_er_graph("g", 100, 0.2, &unit(1), &mut rng).unwrap().num_edges())
            .sum();
        let mean = total as f64 / draws as f64;
        // std of the mean of 1000 Binomial(4950, 0.2) draws
        let sd = (4950.0 * 0.2 * 0.8 / draws as f64).sqrt();
        assert!((mean - 990.0).abs() < 3.0 * sd, "mean edges {mean}");
    }

    #[test]
    fn edge_count_chi_square() {
        let (n, p, draws) = (20usize, 0.2, 10_000usize);
        let trials = (n * (n - 1) / 2) as u64;
        let mut rng = rng_from(3);
        let mut counts = vec![0usize; trials as usize + 1];
        for _ in 0..draws {
            counts[sample_er_graph("g", n, p, &unit(1), &mut rng).unwrap().num_edges()] += 1;
        }
        let binom = Binomial::new(p, trials).unwrap();
        // merge tails until each bin expects at least 5
        let mut bins: Vec<(f64, f64)> = Vec::new();
        let (mut obs, mut exp) = (0.0, 0.0);
        for (k, &c) in counts.iter().enumerate() {
            obs += c as f64;
            exp += binom.pmf(k as u64) * draws as f64;
            if exp >= 5.0 {
                bins.push((obs, exp));
                obs = 0.0;
                exp = 0.0;
            }
        }
        if let Some(last) = bins.last_mut() {
            last.0 += obs;
            last.1 += exp;
        }
        let stat: f64 = bins.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
        let crit = ChiSquared::new((bins.len() - 1) as f64).unwrap().inverse_cdf(0.99);
        assert!(stat < crit, "chi-square {stat} >= {crit}");
    }

    #[test]
    fn feature_moments_match_request() {
        let m = FeatureMoments {
            mu: vec![2.0, -1.0, 0.5],
            sigma: vec![0.5, 3.0, 1.0],
        };
        let mut rng = rng_from(4);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0.0;
        while count < 100_000.0 {
            let g = sample_er_graph("g", 50, 0.0, &m, &mut rng).unwrap();
            for r in 0..50 {
                for (j, x) in g.features().row(r).iter().enumerate() {
                    sum[j] += x;
                    sq[j] += x * x;
                }
            }
            count += 50.0;
        }
        for j in 0..3 {
            let mean = sum[j] / count;
            let sd = (sq[j] / count - mean * mean).sqrt();
            // 1% of the requested moment, measured against sigma for the mean
            assert!((mean - m.mu[j]).abs() < 0.01 * m.mu[j].abs().max(m.sigma[j]), "mean {mean}");
            assert!((sd - m.sigma[j]).abs() < 0.01 * m.sigma[j], "sd {sd}");
        }
    }

    #[test]
    fn zero_sigma_is_constant() {
        let m = FeatureMoments {
            mu: vec![3.0],
            sigma: vec![0.0],
        };
        let g = sample_er_graph("g", 10, 0.5, &m, &mut rng_from(5)).unwrap();
        assert!(g.features().values().iter().all(|&x| x == 3.0));
    }
}
