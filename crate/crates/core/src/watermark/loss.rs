use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{InjectionConfig, WatermarkKey};
use crate::autodiff::{Tape, Var};
use crate::encoder::{BoundParams, EncoderParams, EncoderVars, GraphBatch, ParamSet};
use crate::error::{invalid, Result};
use crate::graphs::Graph;
use crate::pretrain::pretrain_grad;
use crate::rng::Rng;

/// How the `T` watermark gradients at the perturbed points are combined
/// in the outer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerTermWeighting {
    /// `λ · Σ_t ∇L_W(θ+δ_t)`.
    Sum,
    /// `λ · (1/T) Σ_t ∇L_W(θ+δ_t)`, accumulated as a running mean so that
    /// identical terms reproduce the single-term gradient exactly.
    #[default]
    Mean,
}

/// `Σ_pairs ‖h_a − h_b‖² + Σ_pairs Σ_{k∈{a,b}} Σ_i max(0, m − ‖h_k − h_i‖²)`
/// recorded on `tape`. `margin = None` drops the hinge sum.
pub fn watermark_objective(
    tape: &mut Tape,
    vars: &EncoderVars,
    key: &WatermarkKey,
    real: &[&Graph],
    margin: Option<f64>,
) -> Result<Var> {
    let k = key.len();
    let hinge = margin.is_some() && !real.is_empty();
    let mut graphs = key.graphs();
    if hinge {
        graphs.extend_from_slice(real);
    }
    let batch = GraphBatch::new(graphs)?;
    let h = vars.embed(tape, &batch)?;
    let ha = tape.slice_rows(h, 0, k)?;
    let hb = tape.slice_rows(h, k, 2 * k)?;
    let diff = tape.sub(ha, hb)?;
    let pull = tape.l2_norm_sq(diff);
    let Some(m) = margin.filter(|_| hinge) else {
        return Ok(pull);
    };
    let hk = tape.slice_rows(h, 0, 2 * k)?;
    let hr = tape.slice_rows(h, 2 * k, 2 * k + real.len())?;
    let d = tape.pairwise_sq_dist(hk, hr)?;
    let neg = tape.scale(d, -1.0);
    let gap = tape.add_scalar(neg, m);
    let active = tape.relu(gap);
    let push = tape.sum(active);
    tape.add(pull, push)
}

fn check(params: &EncoderParams, key: &WatermarkKey, margin: Option<f64>) -> Result<()> {
    if let Some(m) = margin {
        if !(m > 0.0) {
            return Err(invalid("margin must be positive"));
        }
    }
    if !key.is_empty() && key.feature_dim() != params.input_dim() {
        return Err(invalid(format!(
            "key feature dim {} does not match encoder input dim {}",
            key.feature_dim(),
            params.input_dim()
        )));
    }
    Ok(())
}

pub fn watermark_loss(params: &EncoderParams, key: &WatermarkKey, real: &[&Graph], margin: Option<f64>) -> Result<f64> {
    check(params, key, margin)?;
    if key.is_empty() {
        warn!("watermark loss of an empty key is 0");
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let l = watermark_objective(&mut tape, &vars, key, real, margin)?;
    Ok(tape.value(l).item())
}

/// Loss value and flat gradient of the watermark loss.
pub fn watermark_grad(
    params: &EncoderParams,
    key: &WatermarkKey,
    real: &[&Graph],
    margin: Option<f64>,
) -> Result<(f64, Vec<f64>)> {
    check(params, key, margin)?;
    if key.is_empty() {
        return Ok((0.0, vec![0.0; params.num_params()]));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let l = watermark_objective(&mut tape, &vars, key, real, margin)?;
    let grads = tape.backward(l)?;
    Ok((tape.value(l).item(), vars.flat_grad(&grads)))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean projection onto `{‖δ‖ ≤ eps}`.
pub fn project_to_ball(delta: &mut [f64], eps: f64) {
    let n = norm(delta);
    if n > eps {
        let s = if n > 0.0 { eps / n } else { 0.0 };
        delta.iter_mut().for_each(|d| *d *= s);
    }
}

fn at(params: &EncoderParams, delta: &[f64]) -> EncoderParams {
    if delta.iter().all(|&d| d == 0.0) {
        params.clone()
    } else {
        params.shifted(delta)
    }
}

/// Ascent trajectory state: the perturbations `δ_1..δ_T` and the watermark
/// gradients at `θ+δ_0 .. θ+δ_T`.
pub(crate) struct Ascent {
    pub deltas: Vec<Vec<f64>>,
    pub grads: Vec<Vec<f64>>,
    /// Watermark loss at the unperturbed parameters.
    pub loss_at_theta: f64,
}

fn checked_norm(delta: &[f64], eps: f64) -> f64 {
    let n = norm(delta);
    assert!(n <= eps + 1e-9, "perturbation norm {n} exceeds budget {eps}");
    n
}

/// `eps / (steps · max(‖g‖, 1))`.
pub fn ascent_step_size(eps: f64, steps: usize, grad_norm: f64) -> f64 {
    eps / (steps as f64 * grad_norm.max(1.0))
}

/// Runs `steps` ascent steps from `δ_0 = 0` with step size
/// `eps / (steps · max(‖g‖, 1))`, projecting onto the ball after each step.
/// When `outer` is set, the gradient at the final point is evaluated too.
#[allow(clippy::too_many_arguments)]
pub(crate) fn ascend(
    params: &EncoderParams,
    key: &WatermarkKey,
    real: &[&Graph],
    margin: Option<f64>,
    eps: f64,
    steps: usize,
    outer: bool,
    norms: &mut Vec<f64>,
) -> Result<Ascent> {
    let n = params.num_params();
    let mut delta = vec![0.0; n];
    let mut deltas = Vec::with_capacity(steps);
    let mut grads = Vec::with_capacity(steps + 1);
    let (loss_at_theta, g0) = watermark_grad(params, key, real, margin)?;
    grads.push(g0);
    for t in 0..steps {
        let g = &grads[t];
        let alpha = ascent_step_size(eps, steps, norm(g));
        delta.iter_mut().zip(g).for_each(|(d, g)| *d += alpha * g);
        project_to_ball(&mut delta, eps);
        norms.push(checked_norm(&delta, eps));
        deltas.push(delta.clone());
        if t + 1 < steps || outer {
            let (_, g) = watermark_grad(&at(params, &delta), key, real, margin)?;
            grads.push(g);
        }
    }
    Ok(Ascent {
        deltas,
        grads,
        loss_at_theta,
    })
}

/// Perturbations `δ_1..δ_T` of the inner gradient ascent.
pub fn inner_ascent(
    params: &EncoderParams,
    key: &WatermarkKey,
    real: &[&Graph],
    margin: Option<f64>,
    eps: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    if !(eps >= 0.0) || steps == 0 {
        return Err(invalid("inner ascent needs eps ≥ 0 and at least one step"));
    }
    Ok(ascend(params, key, real, margin, eps, steps, false, &mut Vec::new())?.deltas)
}

/// Combines watermark gradients at the perturbed points into `out`.
pub(crate) fn add_watermark_terms(out: &mut [f64], terms: &[Vec<f64>], lambda: f64, weighting: InnerTermWeighting) {
    let combined: Vec<f64> = match weighting {
        InnerTermWeighting::Sum => {
            let mut s = vec![0.0; out.len()];
            for g in terms {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            s
        }
        InnerTermWeighting::Mean => {
            let mut m = vec![0.0; out.len()];
            for (t, g) in terms.iter().enumerate() {
                let w = (t + 1) as f64;
                m.iter_mut().zip(g).for_each(|(m, g)| *m += (g - *m) / w);
            }
            m
        }
    };
    out.iter_mut().zip(&combined).for_each(|(o, c)| *o += lambda * c);
}

/// `∇L_pre(θ) + λ·combine_t ∇L_W(θ+δ_t)` with each `δ_t` held constant.
/// With no perturbations the watermark term is evaluated at `θ`.
#[allow(clippy::too_many_arguments)]
pub fn outer_gradient(
    params: &EncoderParams,
    pretrain_batch: &[&Graph],
    key: &WatermarkKey,
    real: &[&Graph],
    cfg: &InjectionConfig,
    deltas: &[Vec<f64>],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let (_, mut grad) = pretrain_grad(params, pretrain_batch, &cfg.pretrain, rng)?;
    if cfg.lambda == 0.0 {
        return Ok(grad);
    }
    let margin = cfg.hinge_margin();
    let terms = if deltas.is_empty() {
        vec![watermark_grad(params, key, real, margin)?.1]
    } else {
        deltas
            .iter()
            .map(|d| watermark_grad(&at(params, d), key, real, margin).map(|(_, g)| g))
            .collect::<Result<Vec<_>>>()?
    };
    add_watermark_terms(&mut grad, &terms, cfg.lambda, cfg.inner_weighting);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_coord, relative_error, Tensor};
    use crate::encoder::{Linear, Readout};
    use crate::graphs::FeatureMoments;
    use crate::rng::rng_from;
    use crate::watermark::{build_key, KeyMetadata, KeySource};
    use rand::Rng as _;

    /// Single-node graphs with non-negative features embed to their own
    /// feature vector under this encoder.
    fn identity_encoder(dim: usize) -> EncoderParams {
        EncoderParams {
            layers: vec![crate::encoder::GinLayer {
                mlp1: Linear::identity(dim),
                mlp2: Linear::identity(dim),
                eps: Tensor::vector(vec![0.0]),
            }],
            readout: Readout::Mean,
        }
    }

    fn point(id: &str, x: Vec<f64>) -> Graph {
        let d = x.len();
        Graph::new(id, 1, vec![], Tensor::matrix(1, d, x).unwrap(), None).unwrap()
    }

    fn key_of(pairs: Vec<(Graph, Graph)>, dim: usize) -> WatermarkKey {
        WatermarkKey {
            pairs,
            meta: KeyMetadata {
                source: KeySource::ErdosRenyi,
                feature_dim: dim,
                edge_prob_a: 0.2,
                edge_prob_b: 0.2,
                size_a: 1,
                size_b: 1,
                seed: None,
                moments: None,
            },
        }
    }

    #[test]
    fn pull_term_only() {
        // single-node graphs with non-negative features pass through unchanged
        let enc = identity_encoder(2);
        let key = key_of(vec![(point("a", vec![1.0, 0.0]), point("b", vec![0.0, 0.0]))], 2);
        assert!((watermark_loss(&enc, &key, &[], Some(1.0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hinge_counts_both_sides() {
        let enc = identity_encoder(2);
        let key = key_of(vec![(point("a", vec![1.0, 0.5]), point("b", vec![1.0, 0.5]))], 2);
        let r = point("r", vec![1.0, 0.5]);
        assert!((watermark_loss(&enc, &key, &[&r], Some(1.0)).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(watermark_loss(&enc, &key, &[&r], None).unwrap(), 0.0);
        let far = point("r", vec![3.0, 0.5]);
        assert_eq!(watermark_loss(&enc, &key, &[&far], Some(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn empty_key_and_bad_margin() {
        let enc = identity_encoder(2);
        assert_eq!(watermark_loss(&enc, &key_of(vec![], 2), &[], Some(1.0)).unwrap(), 0.0);
        let key = key_of(vec![(point("a", vec![1.0, 0.0]), point("b", vec![0.0, 0.0]))], 2);
        assert!(watermark_loss(&enc, &key, &[], Some(0.0)).is_err());
        assert!(watermark_loss(&identity_encoder(3), &key, &[], Some(1.0)).is_err());
    }

    #[test]
    fn step_size_rule() {
        assert!((ascent_step_size(2.0, 1, 10.0) - 0.2).abs() < 1e-15);
        assert_eq!(ascent_step_size(2.0, 2, 0.5), 1.0);
        assert_eq!(ascent_step_size(0.0, 3, 7.0), 0.0);
    }

    #[test]
    fn ascent_first_step() {
        let enc = identity_encoder(2);
        let key = key_of(vec![(point("a", vec![5.0, 0.0]), point("b", vec![0.0, 0.0]))], 2);
        let (_, g) = watermark_grad(&enc, &key, &[], None).unwrap();
        let gn = norm(&g);
        let deltas = inner_ascent(&enc, &key, &[], None, 2.0, 1).unwrap();
        let alpha = 2.0 / gn.max(1.0);
        for (d, g) in deltas[0].iter().zip(&g) {
            assert!((d - alpha * g).abs() < 1e-12);
        }
        assert!((norm(&deltas[0]) - 2.0).abs() < 1e-9 || gn < 1.0);
    }

    #[test]
    fn zero_budget_and_stationary_point() {
        let enc = identity_encoder(2);
        let key = key_of(vec![(point("a", vec![1.0, 0.0]), point("b", vec![0.0, 0.0]))], 2);
        for d in inner_ascent(&enc, &key, &[], None, 0.0, 3).unwrap() {
            assert!(d.iter().all(|&x| x == 0.0));
        }
        let same = key_of(vec![(point("a", vec![1.0, 0.0]), point("b", vec![1.0, 0.0]))], 2);
        for d in inner_ascent(&enc, &same, &[], None, 2.0, 3).unwrap() {
            assert!(d.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn ball_constraint_on_random_instances() {
        let mut rng = rng_from(21);
        let m = FeatureMoments {
            mu: vec![0.0; 3],
            sigma: vec![1.0; 3],
        };
        let cfg = InjectionConfig {
            num_pairs: 3,
            base_node_count: 4,
            node_count_delta: 3,
            ..InjectionConfig::default()
        };
        let key = build_key(&cfg, &m, None, 0, &mut rng).unwrap();
        let real = crate::graphs::sample_er_graph("r", 6, 0.4, &m, &mut rng).unwrap();
        for _ in 0..30 {
            let enc = EncoderParams::init(3, 6, 2, &mut rng);
            let eps = rng.random_range(0.0..5.0);
            let steps = rng.random_range(1..6);
            for d in inner_ascent(&enc, &key, &[&real], Some(1.0), eps, steps).unwrap() {
                assert!(norm(&d) <= eps + 1e-9);
            }
        }
    }

    #[test]
    fn projection() {
        let mut v = vec![3.0, 4.0];
        project_to_ball(&mut v, 1.0);
        assert!((norm(&v) - 1.0).abs() < 1e-12);
        let mut w = vec![0.3, 0.4];
        project_to_ball(&mut w, 1.0);
        assert_eq!(w, vec![0.3, 0.4]);
        let mut z = vec![1.0];
        project_to_ball(&mut z, 0.0);
        assert_eq!(z, vec![0.0]);
    }

    #[test]
    fn mean_weighting_of_identical_terms_is_exact() {
        let mut rng = rng_from(2);
        let g: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut a = vec![0.25; 50];
        let mut b = vec![0.25; 50];
        add_watermark_terms(&mut a, &[g.clone(), g.clone(), g.clone()], 0.1, InnerTermWeighting::Mean);
        add_watermark_terms(&mut b, std::slice::from_ref(&g), 0.1, InnerTermWeighting::Mean);
        assert_eq!(a, b);
        let mut s = vec![0.0; 50];
        add_watermark_terms(&mut s, &[g.clone(), g.clone()], 1.0, InnerTermWeighting::Sum);
        for (s, g) in s.iter().zip(&g) {
            assert_eq!(*s, 2.0 * g);
        }
    }

    #[test]
    fn watermark_gradient_matches_finite_differences() {
        let mut rng = rng_from(31);
        let m = FeatureMoments {
            mu: vec![0.1, -0.2, 0.3],
            sigma: vec![1.0, 0.5, 0.8],
        };
        let cfg = InjectionConfig {
            num_pairs: 2,
            base_node_count: 4,
            node_count_delta: 3,
            edge_prob: 0.4,
            ..InjectionConfig::default()
        };
        let key = build_key(&cfg, &m, None, 0, &mut rng).unwrap();
        let reals: Vec<Graph> = (0..3)
            .map(|i| crate::graphs::sample_er_graph(format!("r{i}"), 5, 0.4, &m, &mut rng).unwrap())
            .collect();
        let real: Vec<&Graph> = reals.iter().collect();
        let enc = EncoderParams::init(3, 5, 2, &mut rng);
        // a wide margin keeps most hinges active so their gradient is exercised
        for margin in [Some(50.0), None] {
            let (_, g) = watermark_grad(&enc, &key, &real, margin).unwrap();
            let flat = enc.flatten();
            for _ in 0..40 {
                let i = rng.random_range(0..flat.len());
                let num = finite_diff_coord(
                    |x| {
                        let mut p = enc.clone();
                        p.assign_flat(x);
                        watermark_loss(&p, &key, &real, margin).unwrap()
                    },
                    &flat,
                    i,
                    1e-6,
                );
                assert!(relative_error(g[i], num, 1e-3) < 1e-4, "coord {i}: {} vs {num}", g[i]);
            }
        }
    }
}
