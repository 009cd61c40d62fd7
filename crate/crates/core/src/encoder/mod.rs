//! GIN encoder, MLP classifier head and Lipschitz machinery.

mod checkpoint;
mod classifier;
mod gin;
mod spectral;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use classifier::{argmax, predict_class, predict_logits, Activation, ClassifierParams, ClassifierVars};
pub use gin::{encode, encode_many, Embedding, EncoderParams, EncoderVars, GinLayer, GraphBatch, Readout};
pub use spectral::{lipschitz_bound, spectral_norm, spectral_norm_default, POWER_ITERS, POWER_TOL};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Affine map `x W + b` with `W` of shape `[in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `±1/√in` initialization for weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let weight = Tensor::matrix(input, output, draw(input * output)).expect("shape");
        let bias = Tensor::vector(draw(output));
        Self { weight, bias }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Tensor::identity(n),
            bias: Tensor::vector(vec![0.0; n]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        let bind = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LinearVars {
            weight: bind(tape, &self.weight),
            bias: bind(tape, &self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }
}

/// Flat-vector view over an ordered set of parameter tensors.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.values());
        }
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Copy of `self` with `delta` added coordinatewise.
    fn shifted(&self, delta: &[f64]) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        let flat: Vec<f64> = self.flatten().iter().zip(delta).map(|(a, b)| a + b).collect();
        out.assign_flat(&flat);
        out
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Tape handles in the same order as [`ParamSet::tensors`].
pub trait BoundParams {
    fn vars(&self) -> Vec<Var>;

    fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for v in self.vars() {
            out.extend(grads.wrt(v).into_values());
        }
        out
    }
}
