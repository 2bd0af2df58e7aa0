//! Alternating optimization: Step 1 updates the sample-separation network
//! (theta_f1, theta_y1, theta_c), Step 2 updates the distribution-matching
//! network in two sub-steps, (theta_y2, theta_d, theta_ds) then
//! (theta_f2, theta_ds). Similarity weights are recomputed at the start of
//! every Step 2; one triplet per mini-batch serves both sub-steps.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::data::{epoch_batches, Dataset, SourceBatch, TargetBatch};
use crate::error::{MtsError, Result};
use crate::eval::{self, InferenceRule};
use crate::losses::{self, BatchWeights, MutualSide};
use crate::matrix::Matrix;
use crate::nn::{GroupId, Hyperparams, NetDims, NetworkBundle};

/// Training variants: the full method, the ablations of the method's parts,
/// and the source-only baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// All similarity weights forced to 1.
    NoW,
    /// beta = 0: no mutual coupling.
    NoMutual,
    /// alpha = 0: no domain-separating loss.
    NoDs,
    /// Mutual term uses symmetric KL instead of MSE.
    NoMse,
    /// One extractor shared by both networks.
    NoS,
    /// Classification-only baseline with threshold-based unknown rejection.
    SourceOnly,
}

impl Ablation {
    pub const SWEEP: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoW,
        Ablation::NoMutual,
        Ablation::NoDs,
        Ablation::NoMse,
        Ablation::NoS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoW => "no_w",
            Ablation::NoMutual => "no_mutual",
            Ablation::NoDs => "no_ds",
            Ablation::NoMse => "no_mse",
            Ablation::NoS => "no_s",
            Ablation::SourceOnly => "source_only",
        }
    }

    pub fn from_name(s: &str) -> Result<Ablation> {
        Ok(match s {
            "full" => Ablation::Full,
            "no_w" => Ablation::NoW,
            "no_mutual" => Ablation::NoMutual,
            "no_ds" => Ablation::NoDs,
            "no_mse" => Ablation::NoMse,
            "no_s" => Ablation::NoS,
            "source_only" => Ablation::SourceOnly,
            _ => return Err(MtsError::Config(format!("unknown ablation {s:?}"))),
        })
    }
}

/// The three exemplar rows for the domain-separating heads.
#[derive(Debug, Clone)]
pub struct Triplet {
    /// 3 x d input rows: (random source, most-similar target, least-similar target).
    pub pi: Matrix,
    pub source_index: usize,
    pub max_index: usize,
    pub min_index: usize,
    /// True when every weight ties and pi_2 = pi_3.
    pub degenerate: bool,
}

/// pi_1 uniform from the source batch, pi_2 = argmax w, pi_3 = argmin w;
/// ties resolve to the lowest index.
pub fn select_triplet(
    src: &SourceBatch,
    tgt: &TargetBatch,
    weights: &BatchWeights,
    rng: &mut ChaCha8Rng,
) -> Result<Triplet> {
    if tgt.x.rows() < 2 {
        return Err(MtsError::Data(format!(
            "select_triplet: target batch has {} samples, need >= 2",
            tgt.x.rows()
        )));
    }
    if src.x.rows() == 0 {
        return Err(MtsError::Data("select_triplet: empty source batch".into()));
    }
    let source_index = rng.gen_range(0..src.x.rows());
    let max_index = weights.argmax();
    let min_index = weights.argmin();
    let pi = src
        .x
        .select_rows(&[source_index])?
        .concat_rows(&tgt.x.select_rows(&[max_index])?)?
        .concat_rows(&tgt.x.select_rows(&[min_index])?)?;
    Ok(Triplet { pi, source_index, max_index, min_index, degenerate: max_index == min_index })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SsnStats {
    pub loss_theta1: f64,
    pub loss_mutual: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DmnStats {
    pub loss_theta2a: f64,
    pub loss_theta2b: f64,
    pub loss_mutual: f64,
    pub degenerate_triplet: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_theta1: f64,
    pub loss_theta2a: f64,
    pub loss_theta2b: f64,
    pub loss_mse: f64,
    pub os: f64,
    pub os_star: f64,
    pub unk: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str =
        "epoch,loss_theta1,loss_theta2a,loss_theta2b,loss_mse,os,os_star,unk";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.loss_theta1,
                r.loss_theta2a,
                r.loss_theta2b,
                r.loss_mse,
                r.os,
                r.os_star,
                r.unk
            ));
        }
        out
    }
}

/// Ablation- and schedule-resolved knobs for one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepKnobs {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub uw_mode: crate::nn::UnknownWeightMode,
    pub force_unit_weights: bool,
    pub sym_kl_mutual: bool,
}

impl StepKnobs {
    fn from(hp: &Hyperparams, ablation: Ablation, lr: f64) -> StepKnobs {
        StepKnobs {
            alpha: if ablation == Ablation::NoDs { 0.0 } else { hp.alpha },
            beta: if ablation == Ablation::NoMutual { 0.0 } else { hp.beta },
            lr,
            momentum: hp.momentum,
            weight_decay: hp.weight_decay,
            uw_mode: hp.unknown_weight_mode,
            force_unit_weights: ablation == Ablation::NoW,
            sym_kl_mutual: ablation == Ablation::NoMse,
        }
    }
}

fn finite_or_abort(g: &Graph, id: NodeId, what: &str) -> Result<f64> {
    let v = g.value(id).item()?;
    if !v.is_finite() {
        return Err(MtsError::Numerical(format!("{what} is {v}")));
    }
    Ok(v)
}

fn mutual_term(
    g: &mut Graph,
    b: &NetworkBundle,
    src: &SourceBatch,
    tgt: &TargetBatch,
    side: MutualSide,
    knobs: &StepKnobs,
) -> Result<NodeId> {
    if knobs.sym_kl_mutual {
        losses::loss_sym_kl_mutual(g, b, src, tgt, side)
    } else {
        losses::loss_mse_mutual(g, b, src, tgt, side)
    }
}

/// Step 1: one momentum-SGD step on L_theta1 + beta*L_mse1 over exactly
/// (theta_f1, theta_y1, theta_c).
pub fn ssn_step(
    b: &mut NetworkBundle,
    src: &SourceBatch,
    tgt: &TargetBatch,
    knobs: &StepKnobs,
) -> Result<SsnStats> {
    let mut g = Graph::new();
    let t1 = losses::loss_theta1(&mut g, b, src)?;
    let m = mutual_term(&mut g, b, src, tgt, MutualSide::Ssn, knobs)?;
    let bm = g.scalar_mul(knobs.beta, m);
    let root = g.add(t1, bm)?;
    let stats = SsnStats {
        loss_theta1: finite_or_abort(&g, t1, "L_theta1")?,
        loss_mutual: finite_or_abort(&g, m, "L_mse1")?,
    };
    finite_or_abort(&g, root, "SSN objective")?;
    let groups = [GroupId::F1, GroupId::Y1, GroupId::C];
    let grads = g.backward(root, &b.param_ids(&groups))?;
    b.sgd_momentum_step(&groups, &grads, knobs.lr, knobs.momentum, knobs.weight_decay)?;
    Ok(stats)
}

/// Step 2: fresh similarity weights, one triplet, then the two sub-steps.
/// Sub-step (a) updates (theta_y2, theta_d, theta_ds) on
/// L_theta2a + beta*L_mse2; sub-step (b) updates (theta_f2, theta_ds) on
/// L_theta2b + beta*L_mse2.
pub fn dmn_step(
    b: &mut NetworkBundle,
    src: &SourceBatch,
    tgt: &TargetBatch,
    knobs: &StepKnobs,
    rng: &mut ChaCha8Rng,
) -> Result<DmnStats> {
    let weights = if knobs.force_unit_weights {
        BatchWeights::ones(tgt.x.rows())
    } else {
        losses::similarity_weights(b, tgt)?
    };
    let triplet = select_triplet(src, tgt, &weights, rng)?;

    // sub-step (a)
    let mut g = Graph::new();
    let t2a = losses::loss_theta2a(&mut g, b, src, tgt, &weights, &triplet.pi, knobs.alpha, knobs.uw_mode)?;
    let m = mutual_term(&mut g, b, src, tgt, MutualSide::Dmn, knobs)?;
    let bm = g.scalar_mul(knobs.beta, m);
    let root = g.add(t2a, bm)?;
    let loss_theta2a = finite_or_abort(&g, t2a, "L_theta2a")?;
    let loss_mutual = finite_or_abort(&g, m, "L_mse2")?;
    finite_or_abort(&g, root, "DMN objective (a)")?;
    let groups_a = [GroupId::Y2, GroupId::D, GroupId::Ds];
    let grads = g.backward(root, &b.param_ids(&groups_a))?;
    b.sgd_momentum_step(&groups_a, &grads, knobs.lr, knobs.momentum, knobs.weight_decay)?;

    // sub-step (b), at the parameters left by sub-step (a)
    let mut g = Graph::new();
    let t2b = losses::loss_theta2b(&mut g, b, src, tgt, &weights, &triplet.pi, knobs.alpha, knobs.uw_mode)?;
    let m = mutual_term(&mut g, b, src, tgt, MutualSide::Dmn, knobs)?;
    let bm = g.scalar_mul(knobs.beta, m);
    let root = g.add(t2b, bm)?;
    let loss_theta2b = finite_or_abort(&g, t2b, "L_theta2b")?;
    finite_or_abort(&g, root, "DMN objective (b)")?;
    let groups_b = [GroupId::F2, GroupId::Ds];
    let grads = g.backward(root, &b.param_ids(&groups_b))?;
    b.sgd_momentum_step(&groups_b, &grads, knobs.lr, knobs.momentum, knobs.weight_decay)?;

    Ok(DmnStats { loss_theta2a, loss_theta2b, loss_mutual, degenerate_triplet: triplet.degenerate })
}

fn effective_lr(hp: &Hyperparams, epoch: usize) -> f64 {
    if !hp.lr_decay {
        return hp.lr;
    }
    match epoch {
        e if e >= 225 => hp.lr * 0.01,
        e if e >= 150 => hp.lr * 0.1,
        _ => hp.lr,
    }
}

fn net_dims(hp: &Hyperparams, source: &Dataset) -> NetDims {
    NetDims {
        input: source.dim,
        hidden: hp.hidden_dim,
        feat: hp.feat_dim,
        disc_hidden: hp.disc_hidden_dim,
        k: source.k,
    }
}

fn flush_history(history: &TrainHistory, path: Option<&Path>) {
    if let Some(p) = path {
        let _ = std::fs::write(p, history.to_csv());
    }
}

/// Trains the full MTS model (or an ablation) for a fixed epoch budget.
/// Deterministic per seed. On a numerical abort the history so far is
/// flushed to `history_flush` (when given) before the error returns.
pub fn train(
    source: &Dataset,
    target: &Dataset,
    hp: &Hyperparams,
    ablation: Ablation,
    history_flush: Option<&Path>,
) -> Result<(NetworkBundle, TrainHistory)> {
    hp.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(MtsError::Data("empty dataset".into()));
    }
    if ablation == Ablation::SourceOnly {
        return train_source_only(source, target, hp, history_flush);
    }
    let dims = net_dims(hp, source);
    let mut bundle = NetworkBundle::with_sharing(dims, hp.seed, ablation == Ablation::NoS);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut history = TrainHistory::default();

    for epoch in 0..hp.epochs {
        let knobs = StepKnobs::from(hp, ablation, effective_lr(hp, epoch));
        let src_batches = epoch_batches(source.len(), hp.batch_size, &mut rng)?;
        let tgt_batches = epoch_batches(target.len(), hp.batch_size, &mut rng)?;
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for (sb, tb) in src_batches.iter().zip(&tgt_batches) {
            if tb.len() < 2 {
                continue; // trailing chunk too small for triplet selection
            }
            let src_batch = source.source_batch(sb);
            let tgt_batch = target.target_batch(tb);
            let res = (|| -> Result<(SsnStats, DmnStats)> {
                let s = ssn_step(&mut bundle, &src_batch, &tgt_batch, &knobs)?;
                let d = dmn_step(&mut bundle, &src_batch, &tgt_batch, &knobs, &mut rng)?;
                Ok((s, d))
            })();
            let (s, d) = match res {
                Ok(v) => v,
                Err(e) => {
                    flush_history(&history, history_flush);
                    return Err(e);
                }
            };
            sums.0 += s.loss_theta1;
            sums.1 += d.loss_theta2a;
            sums.2 += d.loss_theta2b;
            sums.3 += d.loss_mutual;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let report = eval::evaluate_target(&bundle, target, InferenceRule::Cy2Argmax)?;
        history.records.push(EpochRecord {
            epoch,
            loss_theta1: sums.0 / n,
            loss_theta2a: sums.1 / n,
            loss_theta2b: sums.2 / n,
            loss_mse: sums.3 / n,
            os: report.os,
            os_star: report.os_star,
            unk: report.unk,
        });
    }
    Ok((bundle, history))
}

/// Baseline: only the (K+1)-way classifier and its extractor, trained with
/// CE on source samples; unknowns come from the max-probability threshold.
pub fn train_source_only(
    source: &Dataset,
    target: &Dataset,
    hp: &Hyperparams,
    history_flush: Option<&Path>,
) -> Result<(NetworkBundle, TrainHistory)> {
    hp.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(MtsError::Data("empty dataset".into()));
    }
    let dims = net_dims(hp, source);
    let mut bundle = NetworkBundle::new(dims, hp.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut history = TrainHistory::default();
    let groups = [GroupId::F2, GroupId::Y2];

    for epoch in 0..hp.epochs {
        let lr = effective_lr(hp, epoch);
        let src_batches = epoch_batches(source.len(), hp.batch_size, &mut rng)?;
        let mut sum = 0.0;
        let mut steps = 0usize;
        for sb in &src_batches {
            let batch = source.source_batch(sb);
            let mut g = Graph::new();
            let x = g.constant(batch.x.clone());
            let feats = bundle.features_graph(&mut g, GroupId::F2, x)?;
            let logits = bundle.head_logits_graph(&mut g, GroupId::Y2, feats)?;
            let labels0: Vec<usize> = batch.y.iter().map(|&y| y - 1).collect();
            let ce = g.ce_with_logits(logits, &labels0)?;
            let root = g.mean_all(ce);
            let loss = match finite_or_abort(&g, root, "baseline CE") {
                Ok(v) => v,
                Err(e) => {
                    flush_history(&history, history_flush);
                    return Err(e);
                }
            };
            let grads = g.backward(root, &bundle.param_ids(&groups))?;
            bundle.sgd_momentum_step(&groups, &grads, lr, hp.momentum, hp.weight_decay)?;
            sum += loss;
            steps += 1;
        }
        let report =
            eval::evaluate_target(&bundle, target, InferenceRule::MaxProbThreshold(hp.tau))?;
        history.records.push(EpochRecord {
            epoch,
            loss_theta1: sum / steps.max(1) as f64,
            loss_theta2a: 0.0,
            loss_theta2b: 0.0,
            loss_mse: 0.0,
            os: report.os,
            os_star: report.os_star,
            unk: report.unk,
        });
    }
    Ok((bundle, history))
}

/// Public constructor for step knobs; lets callers drive single steps.
pub fn step_knobs(hp: &Hyperparams, ablation: Ablation) -> StepKnobs {
    StepKnobs::from(hp, ablation, hp.lr)
}
