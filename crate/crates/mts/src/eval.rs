//! Known/unknown inference rules and the OS / OS* / Unk metrics, plus a
//! domain-confusion diagnostic on the discriminator.

use crate::error::{MtsError, Result};
use crate::losses;
use crate::matrix::Matrix;
use crate::nn::{GroupId, NetworkBundle};

/// How a sample is assigned a label in 1..=K+1 at test time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InferenceRule {
    /// Argmax over the K+1 outputs of C_y2(G_f2(x)); ties to the lowest index.
    Cy2Argmax,
    /// Unknown when max_c G_c(G_f2(x)) falls below the threshold, otherwise
    /// argmax over the K known outputs of C_y2.
    WThreshold(f64),
    /// Source-only baseline rule: unknown when the max known-class
    /// probability of C_y2 falls below the threshold.
    MaxProbThreshold(f64),
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicts labels in 1..=K+1 for every row of `x`.
pub fn predict(b: &NetworkBundle, x: &Matrix, rule: InferenceRule) -> Result<Vec<usize>> {
    let k = b.dims.k;
    let feats = b.features(GroupId::F2, x)?;
    let probs = b.head_forward(GroupId::Y2, &feats)?;
    match rule {
        InferenceRule::Cy2Argmax => {
            Ok((0..probs.rows()).map(|i| 1 + argmax_lowest(probs.row(i))).collect())
        }
        InferenceRule::WThreshold(tau) => {
            let w = losses::similarity_weights(b, &crate::data::TargetBatch { x: x.clone() })?;
            Ok((0..probs.rows())
                .map(|i| {
                    if w.w[i] < tau {
                        k + 1
                    } else {
                        1 + argmax_lowest(&probs.row(i)[..k])
                    }
                })
                .collect())
        }
        InferenceRule::MaxProbThreshold(tau) => Ok((0..probs.rows())
            .map(|i| {
                let known = &probs.row(i)[..k];
                let best = argmax_lowest(known);
                if known[best] < tau {
                    k + 1
                } else {
                    1 + best
                }
            })
            .collect()),
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Per-class recall for classes 1..=K+1.
    pub per_class_acc: Vec<f64>,
    pub os: f64,
    pub os_star: f64,
    pub unk: f64,
    /// (K+1)x(K+1) count matrix; rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub n_evaluated: usize,
}

/// Per-class recalls and their OS / OS* / Unk aggregates.
/// Every class 1..=K+1 must be present among the true labels.
pub fn metrics(predictions: &[usize], true_labels: &[usize], k: usize) -> Result<EvalReport> {
    if predictions.len() != true_labels.len() {
        return Err(MtsError::Dimension(format!(
            "metrics: {} predictions for {} labels",
            predictions.len(),
            true_labels.len()
        )));
    }
    let classes = k + 1;
    for (&p, &t) in predictions.iter().zip(true_labels) {
        if p == 0 || p > classes || t == 0 || t > classes {
            return Err(MtsError::Data(format!("label pair ({t},{p}) out of range 1..={classes}")));
        }
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in predictions.iter().zip(true_labels) {
        confusion[t - 1][p - 1] += 1;
    }
    let mut per_class_acc = Vec::with_capacity(classes);
    for (cls, row) in confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total == 0 {
            return Err(MtsError::Data(format!(
                "class {} absent from true labels; its accuracy is undefined",
                cls + 1
            )));
        }
        per_class_acc.push(row[cls] as f64 / total as f64);
    }
    let os = per_class_acc.iter().sum::<f64>() / classes as f64;
    let os_star = per_class_acc[..k].iter().sum::<f64>() / k as f64;
    let unk = per_class_acc[k];
    Ok(EvalReport { per_class_acc, os, os_star, unk, confusion, n_evaluated: predictions.len() })
}

/// Predicts every target sample and scores it against the target labels.
pub fn evaluate_target(
    b: &NetworkBundle,
    target: &crate::data::Dataset,
    rule: InferenceRule,
) -> Result<EvalReport> {
    let x = target.all_features();
    let preds = predict(b, &x, rule)?;
    let truth: Vec<usize> = target.samples.iter().map(|s| s.y).collect();
    metrics(&preds, &truth, b.dims.k)
}

/// Accuracy of thresholding G_d at 0.5 on known-class samples from both
/// domains. Near 0.5 means the domains are confused (adaptation worked).
pub fn discriminator_confusion(
    b: &NetworkBundle,
    source_known: &Matrix,
    target_known: &Matrix,
) -> Result<f64> {
    if source_known.rows() == 0 || target_known.rows() == 0 {
        return Err(MtsError::Data("discriminator_confusion: empty input".into()));
    }
    let mut correct = 0usize;
    let sf = b.features(GroupId::F2, source_known)?;
    let sp = b.head_forward(GroupId::D, &sf)?;
    for i in 0..sp.rows() {
        if sp.get(i, 0) > 0.5 {
            correct += 1;
        }
    }
    let tf = b.features(GroupId::F2, target_known)?;
    let tp = b.head_forward(GroupId::D, &tf)?;
    for i in 0..tp.rows() {
        if tp.get(i, 0) <= 0.5 {
            correct += 1;
        }
    }
    Ok(correct as f64 / (sp.rows() + tp.rows()) as f64)
}

impl EvalReport {
    /// `metric,value` CSV rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("os,{}\n", self.os));
        out.push_str(&format!("os_star,{}\n", self.os_star));
        out.push_str(&format!("unk,{}\n", self.unk));
        for (i, a) in self.per_class_acc.iter().enumerate() {
            out.push_str(&format!("acc_class_{},{}\n", i + 1, a));
        }
        out.push_str(&format!("n_evaluated,{}\n", self.n_evaluated));
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<12} {:>8}\n", "metric", "value"));
        out.push_str(&format!("{:<12} {:>8.4}\n", "OS", self.os));
        out.push_str(&format!("{:<12} {:>8.4}\n", "OS*", self.os_star));
        out.push_str(&format!("{:<12} {:>8.4}\n", "Unk", self.unk));
        for (i, a) in self.per_class_acc.iter().enumerate() {
            out.push_str(&format!("{:<12} {:>8.4}\n", format!("class {}", i + 1), a));
        }
        out
    }
}
