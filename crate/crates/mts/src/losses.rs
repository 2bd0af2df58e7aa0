//! The MTS loss quantities as differentiable scalars over the autograd graph,
//! plus probability-level helpers used by hand-value tests.

use crate::autograd::{Graph, NodeId};
use crate::data::{SourceBatch, TargetBatch};
use crate::error::{MtsError, Result};
use crate::matrix::Matrix;
use crate::nn::{GroupId, NetworkBundle, UnknownWeightMode};

const PROB_LO: f64 = 1e-12;
const PROB_HI: f64 = 1.0 - 1e-12;

/// Per-target-sample similarity weights. Treated as constants: they are
/// computed outside any graph, so no gradient can reach them.
#[derive(Debug, Clone)]
pub struct BatchWeights {
    /// n_t x K per-head probabilities from G_c(G_f2(x)).
    pub p: Matrix,
    /// w_j = max_c p_c, one entry per target sample.
    pub w: Vec<f64>,
}

impl BatchWeights {
    /// All-ones weights (the "w/o w" ablation).
    pub fn ones(n: usize) -> BatchWeights {
        BatchWeights { p: Matrix::zeros(n, 1).map(|_| 1.0), w: vec![1.0; n] }
    }

    pub fn sum(&self) -> f64 {
        self.w.iter().sum()
    }

    /// Index of the max weight; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.w.iter().enumerate() {
            if v > self.w[best] {
                best = i;
            }
        }
        best
    }

    /// Index of the min weight; ties resolve to the lowest index.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.w.iter().enumerate() {
            if v < self.w[best] {
                best = i;
            }
        }
        best
    }
}

/// Label function for the domain-separating heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndicatorMode {
    /// I(i, ds) = 1 iff i = ds.
    Standard,
    /// Classes 1 and 2 merge: I(i, ds) = 1 iff both differ from 3, or both are 3.
    Revised,
}

impl IndicatorMode {
    /// i, ds are 1-based in 1..=3.
    pub fn value(self, i: usize, ds: usize) -> f64 {
        let hit = match self {
            IndicatorMode::Standard => i == ds,
            IndicatorMode::Revised => (i != 3 && ds != 3) || (i == 3 && ds == 3),
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

/// Which network is being updated; the other's branch of the mutual loss is
/// gradient-detached and acts as a fixed teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutualSide {
    Ssn,
    Dmn,
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(MtsError::Data("empty source batch".into()));
    }
    for &y in labels {
        if y == 0 || y > k {
            return Err(MtsError::Data(format!("label {y} out of range 1..={k}")));
        }
    }
    Ok(())
}

fn one_hot(labels: &[usize], k: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), k);
    for (i, &y) in labels.iter().enumerate() {
        m.set(i, y - 1, 1.0);
    }
    m
}

/// Mean CE of C_y1(G_f1(x)) against source labels.
pub fn loss_c1(g: &mut Graph, b: &NetworkBundle, src: &SourceBatch) -> Result<NodeId> {
    check_labels(&src.y, b.dims.k)?;
    let x = g.constant(src.x.clone());
    let feats = b.features_graph(g, GroupId::F1, x)?;
    let logits = b.head_logits_graph(g, GroupId::Y1, feats)?;
    let labels0: Vec<usize> = src.y.iter().map(|&y| y - 1).collect();
    let ce = g.ce_with_logits(logits, &labels0)?;
    Ok(g.mean_all(ce))
}

/// One-vs-rest BCE over the K binary heads of G_c on G_f1 features.
pub fn loss_s(g: &mut Graph, b: &NetworkBundle, src: &SourceBatch) -> Result<NodeId> {
    check_labels(&src.y, b.dims.k)?;
    let x = g.constant(src.x.clone());
    let feats = b.features_graph(g, GroupId::F1, x)?;
    let logits = b.head_logits_graph(g, GroupId::C, feats)?;
    let targets = one_hot(&src.y, b.dims.k);
    let bce = g.bce_with_logits(logits, targets)?;
    Ok(g.mean_all(bce))
}

pub fn loss_theta1(g: &mut Graph, b: &NetworkBundle, src: &SourceBatch) -> Result<NodeId> {
    let c1 = loss_c1(g, b, src)?;
    let s = loss_s(g, b, src)?;
    g.add(c1, s)
}

/// Similarity w_j = max_c G_c(G_f2(x_j)); computed gradient-free.
pub fn similarity_weights(b: &NetworkBundle, tgt: &TargetBatch) -> Result<BatchWeights> {
    if tgt.x.rows() == 0 {
        return Err(MtsError::Data("empty target batch".into()));
    }
    let feats = b.features(GroupId::F2, &tgt.x)?;
    let p = b.head_forward(GroupId::C, &feats)?;
    let w = (0..p.rows())
        .map(|i| p.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(BatchWeights { p, w })
}

/// Extended-classifier loss: source CE on the K+1-way head plus a weighted
/// CE pushing the least-similar target sample toward the unknown class.
pub fn loss_c2(
    g: &mut Graph,
    b: &NetworkBundle,
    src: &SourceBatch,
    tgt: &TargetBatch,
    weights: &BatchWeights,
    mode: UnknownWeightMode,
) -> Result<NodeId> {
    check_labels(&src.y, b.dims.k)?;
    if tgt.x.rows() == 0 {
        return Err(MtsError::Data("empty target batch".into()));
    }
    let x = g.constant(src.x.clone());
    let feats = b.features_graph(g, GroupId::F2, x)?;
    let logits = b.head_logits_graph(g, GroupId::Y2, feats)?;
    let labels0: Vec<usize> = src.y.iter().map(|&y| y - 1).collect();
    let ce = g.ce_with_logits(logits, &labels0)?;
    let src_term = g.mean_all(ce);

    let j = weights.argmin();
    let u = match mode {
        UnknownWeightMode::LiteralW => weights.w[j],
        UnknownWeightMode::OneMinusW => 1.0 - weights.w[j],
    };
    let xt = g.constant(tgt.x.select_rows(&[j])?);
    let tfeats = b.features_graph(g, GroupId::F2, xt)?;
    let tlogits = b.head_logits_graph(g, GroupId::Y2, tfeats)?;
    let tce = g.ce_with_logits(tlogits, &[b.dims.k])?;
    let tmean = g.mean_all(tce);
    let tgt_term = g.scalar_mul(u, tmean);

    g.add(src_term, tgt_term)
}

/// Weighted adversarial adaptation loss for the discriminator.
pub fn loss_d(
    g: &mut Graph,
    b: &NetworkBundle,
    src: &SourceBatch,
    tgt: &TargetBatch,
    weights: &BatchWeights,
) -> Result<NodeId> {
    if src.x.rows() == 0 || tgt.x.rows() == 0 {
        return Err(MtsError::Data("empty batch".into()));
    }
    let wsum = weights.sum();
    if wsum <= 0.0 {
        return Err(MtsError::Domain("degenerate similarity weights: sum is 0".into()));
    }
    let xs = g.constant(src.x.clone());
    let sfeats = b.features_graph(g, GroupId::F2, xs)?;
    let slogits = b.head_logits_graph(g, GroupId::D, sfeats)?;
    let ones = Matrix::zeros(src.x.rows(), 1).map(|_| 1.0);
    let sbce = g.bce_with_logits(slogits, ones)?;
    let src_term = g.mean_all(sbce);

    let xt = g.constant(tgt.x.clone());
    let tfeats = b.features_graph(g, GroupId::F2, xt)?;
    let tlogits = b.head_logits_graph(g, GroupId::D, tfeats)?;
    // BCE(1 - p, 1) = BCE(p, 0)
    let zeros = Matrix::zeros(tgt.x.rows(), 1);
    let tbce = g.bce_with_logits(tlogits, zeros)?;
    let wrow = g.constant(Matrix::from_vec(1, weights.w.len(), weights.w.clone())?);
    let weighted = g.matmul(wrow, tbce)?;
    let tgt_term = g.scalar_mul(1.0 / wsum, weighted);

    g.add(src_term, tgt_term)
}

/// Domain-separating loss over the (pi_1, pi_2, pi_3) exemplar rows.
/// `pi` holds the three input-space rows in order.
pub fn loss_ds(g: &mut Graph, b: &NetworkBundle, pi: &Matrix, mode: IndicatorMode) -> Result<NodeId> {
    if pi.rows() != 3 {
        return Err(MtsError::Dimension(format!("loss_ds: expected 3 rows, got {}", pi.rows())));
    }
    let x = g.constant(pi.clone());
    let feats = b.features_graph(g, GroupId::F2, x)?;
    let logits = b.head_logits_graph(g, GroupId::Ds, feats)?;
    let mut targets = Matrix::zeros(3, 3);
    for i in 1..=3 {
        for ds in 1..=3 {
            targets.set(i - 1, ds - 1, mode.value(i, ds));
        }
    }
    let bce = g.bce_with_logits(logits, targets)?;
    Ok(g.mean_all(bce))
}

/// L_C2 + L_d + alpha * L_ds (standard labels); objective of the
/// (theta_y2, theta_d, theta_ds) update.
#[allow(clippy::too_many_arguments)]
pub fn loss_theta2a(
    g: &mut Graph,
    b: &NetworkBundle,
    src: &SourceBatch,
    tgt: &TargetBatch,
    weights: &BatchWeights,
    pi: &Matrix,
    alpha: f64,
    mode: UnknownWeightMode,
) -> Result<NodeId> {
    let c2 = loss_c2(g, b, src, tgt, weights, mode)?;
    let d = loss_d(g, b, src, tgt, weights)?;
    let ds = loss_ds(g, b, pi, IndicatorMode::Standard)?;
    let cd = g.add(c2, d)?;
    let ads = g.scalar_mul(alpha, ds);
    g.add(cd, ads)
}

/// L_C2 - L_d + alpha * L_ds (revised labels); objective of the
/// (theta_f2, theta_ds) update.
#[allow(clippy::too_many_arguments)]
pub fn loss_theta2b(
    g: &mut Graph,
    b: &NetworkBundle,
    src: &SourceBatch,
    tgt: &TargetBatch,
    weights: &BatchWeights,
    pi: &Matrix,
    alpha: f64,
    mode: UnknownWeightMode,
) -> Result<NodeId> {
    let c2 = loss_c2(g, b, src, tgt, weights, mode)?;
    let d = loss_d(g, b, src, tgt, weights)?;
    let ds = loss_ds(g, b, pi, IndicatorMode::Revised)?;
    let cd = g.sub(c2, d)?;
    let ads = g.scalar_mul(alpha, ds);
    g.add(cd, ads)
}

fn mutual_branch_mse(
    g: &mut Graph,
    b: &NetworkBundle,
    x: &Matrix,
    side: MutualSide,
) -> Result<NodeId> {
    let (live_ext, fixed_ext) = match side {
        MutualSide::Ssn => (GroupId::F1, GroupId::F2),
        MutualSide::Dmn => (GroupId::F2, GroupId::F1),
    };
    let xn = g.constant(x.clone());
    let feats = b.features_graph(g, live_ext, xn)?;
    let logits = b.head_logits_graph(g, GroupId::C, feats)?;
    let live = g.sigmoid(logits);
    // teacher branch: gradient-detached by construction
    let ffeats = b.features(fixed_ext, x)?;
    let fixed = g.constant(b.head_forward(GroupId::C, &ffeats)?);
    let diff = g.sub(live, fixed)?;
    let sq = g.square(diff);
    let m = g.mean_all(sq);
    Ok(g.scalar_mul(b.dims.k as f64, m))
}

/// Mutual-learning MSE between G_c outputs through the two extractors,
/// averaged over source and target batches. The non-updated network's
/// branch is a constant, so its parameters receive no gradient.
pub fn loss_mse_mutual(
    g: &mut Graph,
    b: &NetworkBundle,
    src: &SourceBatch,
    tgt: &TargetBatch,
    side: MutualSide,
) -> Result<NodeId> {
    if src.x.rows() == 0 || tgt.x.rows() == 0 {
        return Err(MtsError::Data("empty batch".into()));
    }
    let s = mutual_branch_mse(g, b, &src.x, side)?;
    let t = mutual_branch_mse(g, b, &tgt.x, side)?;
    let sum = g.add(s, t)?;
    Ok(g.scalar_mul(0.5, sum))
}

fn logit_clamped(p: f64) -> f64 {
    let p = p.clamp(PROB_LO, PROB_HI);
    (p / (1.0 - p)).ln()
}

fn mutual_branch_sym_kl(
    g: &mut Graph,
    b: &NetworkBundle,
    x: &Matrix,
    side: MutualSide,
) -> Result<NodeId> {
    let (live_ext, fixed_ext) = match side {
        MutualSide::Ssn => (GroupId::F1, GroupId::F2),
        MutualSide::Dmn => (GroupId::F2, GroupId::F1),
    };
    let xn = g.constant(x.clone());
    let feats = b.features_graph(g, live_ext, xn)?;
    let z = b.head_logits_graph(g, GroupId::C, feats)?;
    let p = g.sigmoid(z);
    let ffeats = b.features(fixed_ext, x)?;
    let q_probs = b.head_forward(GroupId::C, &ffeats)?;
    let q_logit = g.constant(q_probs.map(logit_clamped));
    let q = g.constant(q_probs);
    // symmetric Bernoulli KL: (p - q) * (logit(p) - logit(q))
    let dp = g.sub(p, q)?;
    let dz = g.sub(z, q_logit)?;
    let prod = g.mul(dp, dz)?;
    let m = g.mean_all(prod);
    Ok(g.scalar_mul(b.dims.k as f64, m))
}

/// Symmetric-KL replacement for the mutual term (the "w/o mse" ablation).
pub fn loss_sym_kl_mutual(
    g: &mut Graph,
    b: &NetworkBundle,
    src: &SourceBatch,
    tgt: &TargetBatch,
    side: MutualSide,
) -> Result<NodeId> {
    if src.x.rows() == 0 || tgt.x.rows() == 0 {
        return Err(MtsError::Data("empty batch".into()));
    }
    let s = mutual_branch_sym_kl(g, b, &src.x, side)?;
    let t = mutual_branch_sym_kl(g, b, &tgt.x, side)?;
    let sum = g.add(s, t)?;
    Ok(g.scalar_mul(0.5, sum))
}

// ---------------------------------------------------------------------------
// Probability-level helpers (hand-value oracles); inputs are clamped.
// ---------------------------------------------------------------------------

pub fn bce_prob(p: f64, target: f64) -> f64 {
    let p = p.clamp(PROB_LO, PROB_HI);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// CE of a probability row against a 0-based label.
pub fn ce_prob(probs: &[f64], label0: usize) -> f64 {
    -probs[label0].clamp(PROB_LO, PROB_HI).ln()
}

pub fn loss_c1_probs(probs: &Matrix, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| ce_prob(probs.row(i), y - 1))
        .sum::<f64>()
        / n
}

pub fn loss_s_probs(head_probs: &Matrix, labels: &[usize], k: usize) -> f64 {
    let n = labels.len() as f64;
    let mut total = 0.0;
    for c in 1..=k {
        for (i, &y) in labels.iter().enumerate() {
            let t = if y == c { 1.0 } else { 0.0 };
            total += bce_prob(head_probs.get(i, c - 1), t);
        }
    }
    total / (k as f64 * n)
}

pub fn loss_d_probs(p_src: &[f64], p_tgt: &[f64], w: &[f64]) -> Result<f64> {
    let wsum: f64 = w.iter().sum();
    if wsum <= 0.0 {
        return Err(MtsError::Domain("degenerate similarity weights: sum is 0".into()));
    }
    let s: f64 = p_src.iter().map(|&p| bce_prob(p, 1.0)).sum::<f64>() / p_src.len() as f64;
    let t: f64 = p_tgt
        .iter()
        .zip(w)
        .map(|(&p, &wj)| wj * bce_prob(p, 0.0))
        .sum::<f64>()
        / wsum;
    Ok(s + t)
}

/// The unknown-class term of the extended-classifier loss.
pub fn unknown_term_prob(p_unknown: f64, u: f64) -> f64 {
    u * (-p_unknown.clamp(PROB_LO, PROB_HI).ln())
}

/// L_ds from a 3x3 matrix of head probabilities, rows = pi_i, cols = heads.
pub fn loss_ds_probs(p: &Matrix, mode: IndicatorMode) -> f64 {
    let mut total = 0.0;
    for i in 1..=3 {
        for ds in 1..=3 {
            total += bce_prob(p.get(i - 1, ds - 1), mode.value(i, ds));
        }
    }
    total / 9.0
}

/// Mutual MSE from the four G_c output matrices.
pub fn loss_mse_probs(c1_src: &Matrix, c2_src: &Matrix, c1_tgt: &Matrix, c2_tgt: &Matrix) -> Result<f64> {
    let term = |a: &Matrix, b: &Matrix| -> Result<f64> {
        let d = a.sub(b)?;
        Ok(d.as_slice().iter().map(|&v| v * v).sum::<f64>() / a.rows() as f64)
    };
    Ok(0.5 * (term(c1_src, c2_src)? + term(c1_tgt, c2_tgt)?))
}
