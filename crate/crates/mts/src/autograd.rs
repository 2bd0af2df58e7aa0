//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A `Graph` is a flat arena of nodes built in topological order during the
//! forward pass and replayed in reverse by `backward`. Graphs are rebuilt
//! per mini-batch; a graph is confined to one training step.
//!
//! Cross-entropy and binary cross-entropy are computed from logits with
//! log-sum-exp internally so adversarial collapse never produces log(0).

use std::collections::{HashMap, HashSet};

use crate::error::{MtsError, Result};
use crate::matrix::Matrix;

/// Identifies one parameter matrix (weight or bias of one layer of one group).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

pub type NodeId = usize;

const PROB_LO: f64 = 1e-12;
const PROB_HI: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    ScalarMul(f64, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    Log(NodeId),
    ClampProb(NodeId),
    MeanAll(NodeId),
    MeanRows(NodeId),
    Square(NodeId),
    ConcatRows(NodeId, NodeId),
    SelectRows(NodeId, Vec<usize>),
    /// Elementwise BCE of logits against a constant target matrix.
    BceWithLogits(NodeId, Matrix),
    /// Per-row CE of logits against constant 0-based labels; output is n x 1.
    CeWithLogits(NodeId, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Tensor {
    op: Op,
    value: Matrix,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool, param: Option<ParamId>) -> NodeId {
        self.nodes.push(Tensor { op, value, requires_grad, param });
        self.nodes.len() - 1
    }

    fn push_op(&mut self, op: Op, value: Matrix, inputs: &[NodeId]) -> NodeId {
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(op, value, rg, None)
    }

    /// Inserts a constant leaf; never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, false, None)
    }

    /// Inserts a parameter leaf. The same `ParamId` may appear at several
    /// nodes of one graph (shared parameters); backward accumulates.
    pub fn param(&mut self, value: Matrix, id: ParamId) -> NodeId {
        self.push(Op::Leaf, value, true, Some(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        Ok(self.push_op(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.add(&self.nodes[b].value)?;
        Ok(self.push_op(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.sub(&self.nodes[b].value)?;
        Ok(self.push_op(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.mul_elem(&self.nodes[b].value)?;
        Ok(self.push_op(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.add_row_broadcast(&self.nodes[row].value)?;
        Ok(self.push_op(Op::AddRowBroadcast(a, row), v, &[a, row]))
    }

    pub fn scalar_mul(&mut self, s: f64, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.scale(s);
        self.push_op(Op::ScalarMul(s, a), v, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(0.0));
        self.push_op(Op::Relu(a), v, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(sigmoid_scalar);
        self.push_op(Op::Sigmoid(a), v, &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let mut out = vec![0.0; x.cols()];
            softmax_row(x.row(i), &mut out);
            for (j, &p) in out.iter().enumerate() {
                v.set(i, j, p);
            }
        }
        self.push_op(Op::SoftmaxRows(a), v, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let x = &self.nodes[a].value;
        if x.as_slice().iter().any(|&v| v <= 0.0) {
            return Err(MtsError::Domain("log of non-positive value".into()));
        }
        let v = x.map(f64::ln);
        Ok(self.push_op(Op::Log(a), v, &[a]))
    }

    /// Clamps raw probabilities into [1e-12, 1-1e-12].
    pub fn clamp_prob(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.clamp(PROB_LO, PROB_HI));
        self.push_op(Op::ClampProb(a), v, &[a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.nodes[a].value.mean_all());
        self.push_op(Op::MeanAll(a), v, &[a])
    }

    /// Column means over the rows; output 1 x cols.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mean_rows();
        self.push_op(Op::MeanRows(a), v, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * x);
        self.push_op(Op::Square(a), v, &[a])
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.concat_rows(&self.nodes[b].value)?;
        Ok(self.push_op(Op::ConcatRows(a, b), v, &[a, b]))
    }

    pub fn select_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.nodes[a].value.select_rows(indices)?;
        Ok(self.push_op(Op::SelectRows(a, indices.to_vec()), v, &[a]))
    }

    /// Elementwise binary cross-entropy from logits: max(z,0) - z*t + ln(1+e^-|z|).
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Matrix) -> Result<NodeId> {
        let z = &self.nodes[logits].value;
        if z.shape() != targets.shape() {
            return Err(MtsError::Dimension(format!(
                "bce_with_logits: logits {:?} vs targets {:?}",
                z.shape(),
                targets.shape()
            )));
        }
        let v = z.zip(&targets, |z, t| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())?;
        Ok(self.push_op(Op::BceWithLogits(logits, targets), v, &[logits]))
    }

    /// Per-row cross-entropy from logits against 0-based labels; output n x 1.
    pub fn ce_with_logits(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = &self.nodes[logits].value;
        if labels.len() != z.rows() {
            return Err(MtsError::Dimension(format!(
                "ce_with_logits: {} labels for {} rows",
                labels.len(),
                z.rows()
            )));
        }
        let mut v = Matrix::zeros(z.rows(), 1);
        for (i, &lab) in labels.iter().enumerate() {
            if lab >= z.cols() {
                return Err(MtsError::Contract(format!(
                    "ce_with_logits: label {} out of range for {} classes",
                    lab,
                    z.cols()
                )));
            }
            let row = z.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            v.set(i, 0, lse - row[lab]);
        }
        Ok(self.push_op(Op::CeWithLogits(logits, labels.to_vec()), v, &[logits]))
    }

    /// Back-propagates from a scalar root, returning gradients for exactly
    /// the parameters in `wrt`. Unreachable parameters get zero gradients.
    pub fn backward(&self, root: NodeId, wrt: &HashSet<ParamId>) -> Result<HashMap<ParamId, Matrix>> {
        let rv = &self.nodes[root].value;
        if rv.shape() != (1, 1) {
            return Err(MtsError::Contract(format!(
                "backward root must be 1x1, got {:?}",
                rv.shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root + 1];
        adj[root] = Some(Matrix::scalar(1.0));

        let mut grads: HashMap<ParamId, Matrix> = HashMap::new();

        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(pid) = node.param {
                if wrt.contains(&pid) {
                    match grads.get_mut(&pid) {
                        Some(acc) => *acc = acc.add(&g)?,
                        None => {
                            grads.insert(pid, g.clone());
                        }
                    }
                }
            }
            self.propagate(id, &g, &mut adj)?;
        }

        // Parameters in wrt that never appeared or were unreachable get zeros
        // of the right shape if they appear in the graph; callers treat a
        // missing entry as zero otherwise.
        for id in 0..=root {
            if let Some(pid) = self.nodes[id].param {
                if wrt.contains(&pid) && !grads.contains_key(&pid) {
                    let (r, c) = self.nodes[id].value.shape();
                    grads.insert(pid, Matrix::zeros(r, c));
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
        match &mut adj[id] {
            Some(acc) => {
                *acc = acc.add(&g)?;
            }
            slot @ None => {
                *slot = Some(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: NodeId, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let want = |this: &Self, i: NodeId| this.nodes[i].requires_grad;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(self, *a) {
                    let gb = g.matmul(&self.nodes[*b].value.transpose())?;
                    Self::accumulate(adj, *a, gb)?;
                }
                if want(self, *b) {
                    let ga = self.nodes[*a].value.transpose().matmul(g)?;
                    Self::accumulate(adj, *b, ga)?;
                }
            }
            Op::Add(a, b) => {
                if want(self, *a) {
                    Self::accumulate(adj, *a, g.clone())?;
                }
                if want(self, *b) {
                    Self::accumulate(adj, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if want(self, *a) {
                    Self::accumulate(adj, *a, g.clone())?;
                }
                if want(self, *b) {
                    Self::accumulate(adj, *b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if want(self, *a) {
                    Self::accumulate(adj, *a, g.mul_elem(&self.nodes[*b].value)?)?;
                }
                if want(self, *b) {
                    Self::accumulate(adj, *b, g.mul_elem(&self.nodes[*a].value)?)?;
                }
            }
            Op::AddRowBroadcast(a, row) => {
                if want(self, *a) {
                    Self::accumulate(adj, *a, g.clone())?;
                }
                if want(self, *row) {
                    let mut sums = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            sums.set(0, j, sums.get(0, j) + g.get(i, j));
                        }
                    }
                    Self::accumulate(adj, *row, sums)?;
                }
            }
            Op::ScalarMul(s, a) => {
                if want(self, *a) {
                    Self::accumulate(adj, *a, g.scale(*s))?;
                }
            }
            Op::Relu(a) => {
                if want(self, *a) {
                    let mask = self.nodes[*a].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    Self::accumulate(adj, *a, g.mul_elem(&mask)?)?;
                }
            }
            Op::Sigmoid(a) => {
                if want(self, *a) {
                    let s = &self.nodes[id].value;
                    let ds = s.map(|y| y * (1.0 - y));
                    Self::accumulate(adj, *a, g.mul_elem(&ds)?)?;
                }
            }
            Op::SoftmaxRows(a) => {
                if want(self, *a) {
                    let y = &self.nodes[id].value;
                    let mut out = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 = (0..y.cols()).map(|j| g.get(i, j) * y.get(i, j)).sum();
                        for j in 0..y.cols() {
                            out.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    Self::accumulate(adj, *a, out)?;
                }
            }
            Op::Log(a) => {
                if want(self, *a) {
                    let inv = self.nodes[*a].value.map(|x| 1.0 / x);
                    Self::accumulate(adj, *a, g.mul_elem(&inv)?)?;
                }
            }
            Op::ClampProb(a) => {
                if want(self, *a) {
                    let mask = self.nodes[*a]
                        .value
                        .map(|x| if x > PROB_LO && x < PROB_HI { 1.0 } else { 0.0 });
                    Self::accumulate(adj, *a, g.mul_elem(&mask)?)?;
                }
            }
            Op::MeanAll(a) => {
                if want(self, *a) {
                    let (r, c) = self.nodes[*a].value.shape();
                    let s = g.item()? / (r * c) as f64;
                    Self::accumulate(adj, *a, Matrix::zeros(r, c).map(|_| s))?;
                }
            }
            Op::MeanRows(a) => {
                if want(self, *a) {
                    let (r, c) = self.nodes[*a].value.shape();
                    let mut out = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            out.set(i, j, g.get(0, j) / r as f64);
                        }
                    }
                    Self::accumulate(adj, *a, out)?;
                }
            }
            Op::Square(a) => {
                if want(self, *a) {
                    let two_x = self.nodes[*a].value.scale(2.0);
                    Self::accumulate(adj, *a, g.mul_elem(&two_x)?)?;
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = self.nodes[*a].value.rows();
                if want(self, *a) {
                    let top = g.select_rows(&(0..ra).collect::<Vec<_>>())?;
                    Self::accumulate(adj, *a, top)?;
                }
                if want(self, *b) {
                    let bot = g.select_rows(&(ra..g.rows()).collect::<Vec<_>>())?;
                    Self::accumulate(adj, *b, bot)?;
                }
            }
            Op::SelectRows(a, indices) => {
                if want(self, *a) {
                    let (r, c) = self.nodes[*a].value.shape();
                    let mut out = Matrix::zeros(r, c);
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            out.set(i, j, out.get(i, j) + g.get(k, j));
                        }
                    }
                    Self::accumulate(adj, *a, out)?;
                }
            }
            Op::BceWithLogits(a, targets) => {
                if want(self, *a) {
                    let z = &self.nodes[*a].value;
                    let d = z.zip(targets, |z, t| sigmoid_scalar(z) - t)?;
                    Self::accumulate(adj, *a, g.mul_elem(&d)?)?;
                }
            }
            Op::CeWithLogits(a, labels) => {
                if want(self, *a) {
                    let z = &self.nodes[*a].value;
                    let mut out = Matrix::zeros(z.rows(), z.cols());
                    for (i, &lab) in labels.iter().enumerate() {
                        let mut sm = vec![0.0; z.cols()];
                        softmax_row(z.row(i), &mut sm);
                        let gi = g.get(i, 0);
                        for (j, &s) in sm.iter().enumerate() {
                            let one = if j == lab { 1.0 } else { 0.0 };
                            out.set(i, j, gi * (s - one));
                        }
                    }
                    Self::accumulate(adj, *a, out)?;
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central-difference check of an analytic gradient. Returns the max over
/// coordinates of |analytic - fd| / max(1, |analytic|).
pub fn grad_check<F>(mut loss: F, point: &[f64], analytic: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(MtsError::Contract(format!("grad_check epsilon {epsilon} not in (0, 1e-3]")));
    }
    if point.len() != analytic.len() {
        return Err(MtsError::Dimension(format!(
            "grad_check: {} coordinates vs {} analytic entries",
            point.len(),
            analytic.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let fp = loss(&x)?;
        x[i] = orig - epsilon;
        let fm = loss(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(MtsError::Numerical(format!(
                "grad_check: non-finite loss at coordinate {i} (f+={fp}, f-={fm})"
            )));
        }
        let fd = (fp - fm) / (2.0 * epsilon);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
