//! Tape-based reverse-mode differentiation.
//!
//! Every forward call appends a node to the tape. Nodes only ever refer to
//! earlier nodes, so the tape is topologically ordered by construction and
//! `backward` is a single reverse sweep.
//!
//! Shape rules per kind:
//!
//! | kind            | inputs                 | output          |
//! |-----------------|------------------------|-----------------|
//! | `matmul`        | `[m,k]`, `[k,n]`       | `[m,n]`         |
//! | `add/sub/mul`   | equal shapes           | same shape      |
//! | `add_row`       | `[m,n]`, `[n]`         | `[m,n]`         |
//! | `relu/sigmoid/tanh/scale` | any          | same shape      |
//! | `sum/mean/l2_norm_sq` | any              | scalar          |
//! | `concat`        | `[m_i, n]...`          | `[Σm_i, n]`     |
//!
//! `mean` spreads its gradient as `1/n` to every element.

use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds reachable through [`Tape::forward`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Sum,
    Mean,
    L2NormSq,
    Concat,
    Scale(f64),
}

/// Undirected adjacency in compressed-row form over a batch of nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
}

impl Adjacency {
    pub fn num_nodes(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn neighbors_of(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    L2NormSq(Var),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    NeighborSum(Var, Arc<Adjacency>),
    SegmentMean(Var, Arc<Vec<usize>>),
    RowDot(Var, Arc<Vec<(usize, usize)>>),
    NormalizeRows(Var),
    PairwiseSqDist(Var, Var),
    SoftmaxXent(Var, Arc<Vec<usize>>),
    BceLogits(Var, Arc<Vec<f64>>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Logit magnitude beyond which binary cross-entropy saturates.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Rows with a norm below this are treated as zero by `normalize_rows`.
const NORM_FLOOR: f64 = 1e-12;

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or zeros if `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Raw gradient slice, `None` when the node received no gradient.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Existing `Var`s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Generic entry point over the documented op kinds.
    pub fn forward(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::Tanh => {
                arity(1)?;
                Ok(self.tanh(inputs[0]))
            }
            OpKind::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::L2NormSq => {
                arity(1)?;
                Ok(self.l2_norm_sq(inputs[0]))
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Scale(c) => {
                arity(1)?;
                Ok(self.scale(inputs[0], c))
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_raw(ta.values(), tb.values(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let vals = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), vals).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let n = ta.cols();
        let vals = ta
            .values()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.values()[i % n])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), vals)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddRow(a, bias), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let vals = ta.values().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), vals).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(shape_err("scale_by", self.value(a), ts));
        }
        let c = ts.item();
        let ta = self.value(a);
        let vals = ta.values().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), vals)?;
        let rg = self.rg(&[a, s]);
        Ok(self.push(t, Op::ScaleBy(a, s), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.len().max(1) as f64;
        let s = ta.values().iter().sum::<f64>() / n;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn l2_norm_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().map(|x| x * x).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::L2NormSq(a), rg)
    }

    /// Stacks tensors along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut vals = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(shape_err("concat", self.value(*first), t));
            }
            rows += t.rows();
            vals.extend_from_slice(t.values());
        }
        let rg = self.rg(parts);
        let t = Tensor::matrix(rows, cols, vals)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start > end || end > ta.rows() {
            return Err(Error::InvalidArgument(format!(
                "slice_rows {start}..{end} out of range for {:?}",
                ta.shape()
            )));
        }
        let c = ta.cols();
        let vals = ta.values()[start * c..end * c].to_vec();
        let t = Tensor::matrix(end - start, c, vals)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    /// `out[v] = Σ_{u ∈ N(v)} h[u]`.
    pub fn neighbor_sum(&mut self, h: Var, adj: Arc<Adjacency>) -> Result<Var> {
        let th = self.value(h);
        if adj.num_nodes() != th.rows() {
            return Err(Error::Shape {
                op: "neighbor_sum",
                lhs: th.shape().to_vec(),
                rhs: vec![adj.num_nodes()],
            });
        }
        let d = th.cols();
        let mut out = vec![0.0; th.len()];
        for v in 0..adj.num_nodes() {
            let dst = &mut out[v * d..(v + 1) * d];
            for &u in adj.neighbors_of(v) {
                for (o, x) in dst.iter_mut().zip(th.row(u)) {
                    *o += x;
                }
            }
        }
        let t = Tensor::new(th.shape().to_vec(), out)?;
        let rg = self.rg(&[h]);
        Ok(self.push(t, Op::NeighborSum(h, adj), rg))
    }

    /// Mean of consecutive row segments; `offsets` has one more entry than
    /// there are segments. Empty segments yield zero rows.
    pub fn segment_mean(&mut self, h: Var, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let th = self.value(h);
        if offsets.last().copied() != Some(th.rows()) {
            return Err(Error::Shape {
                op: "segment_mean",
                lhs: th.shape().to_vec(),
                rhs: offsets.to_vec(),
            });
        }
        let d = th.cols();
        let segs = offsets.len() - 1;
        let mut out = vec![0.0; segs * d];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi <= lo {
                continue;
            }
            let inv = 1.0 / (hi - lo) as f64;
            let dst = &mut out[s * d..(s + 1) * d];
            for r in lo..hi {
                for (o, x) in dst.iter_mut().zip(th.row(r)) {
                    *o += x;
                }
            }
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let t = Tensor::matrix(segs, d, out)?;
        let rg = self.rg(&[h]);
        Ok(self.push(t, Op::SegmentMean(h, offsets), rg))
    }

    /// Inner products `<h[i], h[j]>` for each index pair.
    pub fn row_dot(&mut self, h: Var, pairs: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let th = self.value(h);
        let n = th.rows();
        if let Some(&(i, j)) = pairs.iter().find(|(i, j)| *i >= n || *j >= n) {
            return Err(Error::InvalidArgument(format!(
                "row_dot pair ({i},{j}) out of range for {n} rows"
            )));
        }
        let vals = pairs
            .iter()
            .map(|&(i, j)| th.row(i).iter().zip(th.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        let rg = self.rg(&[h]);
        Ok(self.push(Tensor::vector(vals), Op::RowDot(h, pairs), rg))
    }

    /// Scales each row to unit norm; rows with (near) zero norm map to zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = ta.cols();
        let mut out = ta.values().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < NORM_FLOOR {
                row.iter_mut().for_each(|x| *x = 0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::NormalizeRows(a), rg)
    }

    /// `out[i][j] = ‖a[i] − b[j]‖²`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("pairwise_sq_dist", ta, tb));
        }
        let (m, n) = (ta.rows(), tb.rows());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(
                    ta.row(i)
                        .iter()
                        .zip(tb.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum(),
                );
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::PairwiseSqDist(a, b), rg))
    }

    /// Mean softmax cross-entropy of logit rows against class targets.
    pub fn softmax_xent(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Result<Var> {
        let tl = self.value(logits);
        let (m, c) = (tl.rows(), tl.cols());
        if targets.len() != m || targets.iter().any(|&t| t >= c) {
            return Err(Error::Shape {
                op: "softmax_xent",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = tl.row(i);
            total += log_sum_exp(row) - row[t];
        }
        let loss = if m == 0 { 0.0 } else { total / m as f64 };
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent(logits, targets), rg))
    }

    /// Mean binary cross-entropy with logits clamped to `±LOGIT_CLAMP`.
    pub fn bce_logits(&mut self, logits: Var, labels: Arc<Vec<f64>>) -> Result<Var> {
        let tl = self.value(logits);
        if tl.len() != labels.len() {
            return Err(Error::Shape {
                op: "bce_logits",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let n = tl.len();
        let total: f64 = tl
            .values()
            .iter()
            .zip(labels.iter())
            .map(|(&z, &y)| {
                let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits(logits, labels), rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(da) = self.acc(grads, *a) {
                    // dA = G Bᵀ
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.values()[p * n..(p + 1) * n];
                            da[i * k + p] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    // dB = Aᵀ G
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ta.values()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (d, x) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += a_ip * x;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                if let Some(d) = self.acc(grads, *a) {
                    // input is [c, r]
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, x), y) in d.iter_mut().zip(g).zip(tb.values()) {
                        *d += x * y;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((d, x), y) in d.iter_mut().zip(g).zip(ta.values()) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                let n = out.cols();
                if let Some(d) = self.acc(grads, *bias) {
                    for (i, x) in g.iter().enumerate() {
                        d[i % n] += x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::AddScalar(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                let ta = self.value(*a);
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
                if let Some(d) = self.acc(grads, *s) {
                    d[0] += g.iter().zip(ta.values()).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, x), v) in d.iter_mut().zip(g).zip(ta.values()) {
                        if *v > 0.0 {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, x), y) in d.iter_mut().zip(g).zip(out.values()) {
                        *d += x * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, x), y) in d.iter_mut().zip(g).zip(out.values()) {
                        *d += x * (1.0 - y * y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    let w = g[0] / d.len().max(1) as f64;
                    d.iter_mut().for_each(|d| *d += w);
                }
            }
            Op::L2NormSq(a) => {
                let ta = self.value(*a);
                if let Some(d) = self.acc(grads, *a) {
                    for (d, v) in d.iter_mut().zip(ta.values()) {
                        *d += 2.0 * v * g[0];
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(d) = self.acc(grads, *p) {
                        d.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(d, x)| *d += x);
                    }
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                if let Some(d) = self.acc(grads, *a) {
                    d[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x);
                }
            }
            Op::NeighborSum(h, adj) => {
                let c = out.cols();
                if let Some(d) = self.acc(grads, *h) {
                    for v in 0..adj.num_nodes() {
                        let gv = &g[v * c..(v + 1) * c];
                        for &u in adj.neighbors_of(v) {
                            d[u * c..(u + 1) * c]
                                .iter_mut()
                                .zip(gv)
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                }
            }
            Op::SegmentMean(h, offsets) => {
                let c = out.cols();
                if let Some(d) = self.acc(grads, *h) {
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        if hi <= lo {
                            continue;
                        }
                        let inv = 1.0 / (hi - lo) as f64;
                        let gs = &g[s * c..(s + 1) * c];
                        for r in lo..hi {
                            d[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(gs)
                                .for_each(|(d, x)| *d += x * inv);
                        }
                    }
                }
            }
            Op::RowDot(h, pairs) => {
                let th = self.value(*h);
                let c = th.cols();
                if let Some(d) = self.acc(grads, *h) {
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let gk = g[k];
                        for q in 0..c {
                            let (hi, hj) = (th.values()[i * c + q], th.values()[j * c + q]);
                            d[i * c + q] += gk * hj;
                            d[j * c + q] += gk * hi;
                        }
                    }
                }
            }
            Op::NormalizeRows(a) => {
                let ta = self.value(*a);
                let c = ta.cols().max(1);
                if let Some(d) = self.acc(grads, *a) {
                    for r in 0..ta.len() / c {
                        let x = &ta.values()[r * c..(r + 1) * c];
                        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n < NORM_FLOOR {
                            continue;
                        }
                        let y = &out.values()[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for q in 0..c {
                            d[r * c + q] += (gr[q] - y[q] * dot) / n;
                        }
                    }
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n, c) = (ta.rows(), tb.rows(), ta.cols());
                let mut da = self.nodes[a.0].requires_grad.then(|| vec![0.0; m * c]);
                let mut db = self.nodes[b.0].requires_grad.then(|| vec![0.0; n * c]);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for q in 0..c {
                            let diff = 2.0 * gij * (ta.values()[i * c + q] - tb.values()[j * c + q]);
                            if let Some(da) = da.as_mut() {
                                da[i * c + q] += diff;
                            }
                            if let Some(db) = db.as_mut() {
                                db[j * c + q] -= diff;
                            }
                        }
                    }
                }
                if let (Some(src), Some(d)) = (da, self.acc(grads, *a)) {
                    d.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                }
                if let (Some(src), Some(d)) = (db, self.acc(grads, *b)) {
                    d.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                }
            }
            Op::SoftmaxXent(logits, targets) => {
                let tl = self.value(*logits);
                let (m, c) = (tl.rows(), tl.cols());
                if let Some(d) = self.acc(grads, *logits) {
                    let w = g[0] / m.max(1) as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        let row = tl.row(i);
                        let lse = log_sum_exp(row);
                        for q in 0..c {
                            let p = (row[q] - lse).exp();
                            let y = if q == t { 1.0 } else { 0.0 };
                            d[i * c + q] += w * (p - y);
                        }
                    }
                }
            }
            Op::BceLogits(logits, labels) => {
                let tl = self.value(*logits);
                if let Some(d) = self.acc(grads, *logits) {
                    let w = g[0] / labels.len().max(1) as f64;
                    for (k, (&z, &y)) in tl.values().iter().zip(labels.iter()).enumerate() {
                        if z.abs() >= LOGIT_CLAMP {
                            continue;
                        }
                        d[k] += w * (sigmoid(z) - y);
                    }
                }
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, x) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * x;
            }
        }
    }
    out
}
