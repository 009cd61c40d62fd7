use serde::{Deserialize, Serialize};

use super::{BoundParams, Linear, LinearVars, ParamSet};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::rng::Rng;

/// 1-Lipschitz activations between classifier layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    fn apply_var(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// K-layer MLP head `y = W_K φ(… φ(W_1 e + b_1) …) + b_K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl ClassifierParams {
    /// `depth` linear layers; hidden layers have width `hidden`.
    pub fn init(
        input: usize,
        hidden: usize,
        classes: usize,
        depth: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(invalid("classifier depth must be at least 1"));
        }
        let layers = (0..depth)
            .map(|i| {
                let d_in = if i == 0 { input } else { hidden };
                let d_out = if i + 1 == depth { classes } else { hidden };
                Linear::init(d_in, d_out, rng)
            })
            .collect();
        Ok(Self { layers, activation })
    }

    /// Builds a head from weight matrices given in the `W x` orientation
    /// (`[out, in]`), as written in the textbook MLP formula.
    pub fn from_matrices(ws: &[Tensor], bs: &[Vec<f64>], activation: Activation) -> Result<Self> {
        if ws.is_empty() || ws.len() != bs.len() {
            return Err(invalid("need one bias per weight matrix and at least one layer"));
        }
        let layers = ws
            .iter()
            .zip(bs)
            .map(|(w, b)| Linear {
                weight: w.transpose(),
                bias: Tensor::vector(b.clone()),
            })
            .collect();
        let p = Self { layers, activation };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid("classifier has no layers"));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(invalid(format!(
                    "classifier layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ClassifierVars {
        ClassifierVars {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            activation: self.activation,
        }
    }
}

impl ParamSet for ClassifierParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierVars {
    layers: Vec<LinearVars>,
    activation: Activation,
}

impl ClassifierVars {
    /// Logits for a `[batch, dim]` embedding matrix.
    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(tape, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply_var(tape, h);
            }
        }
        Ok(h)
    }
}

impl BoundParams for ClassifierVars {
    fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Unnormalized class scores for one embedding.
pub fn predict_logits(e: &[f64], params: &ClassifierParams) -> Result<Vec<f64>> {
    if e.len() != params.input_dim() {
        return Err(invalid(format!(
            "embedding dim {} does not match classifier input dim {}",
            e.len(),
            params.input_dim()
        )));
    }
    let mut h = e.to_vec();
    for (i, l) in params.layers.iter().enumerate() {
        let wt = l.weight.transpose();
        let mut y = wt.matvec(&h);
        y.iter_mut().zip(l.bias.values()).for_each(|(y, b)| *y += b);
        if i + 1 < params.layers.len() {
            y.iter_mut().for_each(|v| *v = params.activation.apply(*v));
        }
        h = y;
    }
    Ok(h)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_class(e: &[f64], params: &ClassifierParams) -> Result<usize> {
    Ok(argmax(&predict_logits(e, params)?))
}
