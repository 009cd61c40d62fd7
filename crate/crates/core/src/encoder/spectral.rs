//! Largest singular values and the product Lipschitz bound of an MLP head.

use rand::Rng as _;

use super::ClassifierParams;
use crate::autodiff::{matmul_raw, Tensor};
use crate::rng::rng_from;

pub const POWER_ITERS: usize = 100;
pub const POWER_TOL: f64 = 1e-9;

const START_SEED: u64 = 0x5eed;
const MAX_SQUARINGS: usize = 40;

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Estimate of `‖W‖₂` by power iteration on the Gram matrix.
///
/// The start vector is taken from a repeatedly squared Gram matrix, which
/// converges to the top singular direction even when the two leading
/// singular values are close; `iters` Rayleigh-quotient refinements follow,
/// stopping once successive estimates differ by less than `tol`.
pub fn spectral_norm(w: &Tensor, iters: usize, tol: f64) -> f64 {
    let (m, n) = (w.rows(), w.cols());
    if w.is_empty() || w.values().iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    // Gram matrix on the smaller side
    let (gram, k) = if n <= m {
        let wt = w.transpose();
        (matmul_raw(wt.values(), w.values(), n, m, n), n)
    } else {
        let wt = w.transpose();
        (matmul_raw(w.values(), wt.values(), m, n, m), m)
    };

    let scale = frobenius(&gram);
    let mut power: Vec<f64> = gram.iter().map(|x| x / scale).collect();
    for _ in 0..MAX_SQUARINGS {
        let mut next = matmul_raw(&power, &power, k, k, k);
        let f = frobenius(&next);
        if f == 0.0 || !f.is_finite() {
            break;
        }
        next.iter_mut().for_each(|x| *x /= f);
        let change = frobenius(
            &next
                .iter()
                .zip(&power)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        power = next;
        if change < 1e-15 {
            break;
        }
    }

    // seeded start vector pushed through the squared Gram power
    let mut rng = rng_from(START_SEED);
    let seed_vec: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut v = matmul_raw(&power, &seed_vec, k, k, 1);
    if frobenius(&v) == 0.0 {
        v = seed_vec;
    }
    normalize(&mut v);

    let rayleigh = |v: &[f64]| -> f64 {
        let gv = matmul_raw(&gram, v, k, k, 1);
        v.iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
    };
    let mut sigma = rayleigh(&v);
    for _ in 0..iters.max(1) {
        let mut gv = matmul_raw(&gram, &v, k, k, 1);
        if frobenius(&gv) == 0.0 {
            break;
        }
        normalize(&mut gv);
        v = gv;
        let next = rayleigh(&v);
        let done = (next - sigma).abs() < tol;
        sigma = sigma.max(next);
        if done {
            break;
        }
    }
    sigma
}

fn normalize(v: &mut [f64]) {
    let n = frobenius(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn spectral_norm_default(w: &Tensor) -> f64 {
    spectral_norm(w, POWER_ITERS, POWER_TOL)
}

/// `∏ ‖W_i‖₂` over the head's layers.
pub fn lipschitz_bound(params: &ClassifierParams) -> f64 {
    params
        .layers
        .iter()
        .map(|l| spectral_norm_default(&l.weight))
        .product()
}
