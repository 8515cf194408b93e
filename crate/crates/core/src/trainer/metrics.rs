//! Ranking and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(crate::error::usage_err("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let pos = labels.iter().filter(|l| **l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if labels.iter().any(|l| *l > 1) {
        return Err(crate::error::usage_err("labels must be 0 or 1"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("labels contain a single class".into()));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` over all positive/negative pairs.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    // Twice the Mann-Whitney count, kept integral.
    let mut twice = 0u64;
    let mut neg_below = neg;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i] == 1).count() as u64;
        let n = g.len() as u64 - p;
        neg_below -= n;
        twice += p * (2 * neg_below + n);
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Average precision: `Σ (R_k − R_{k−1}) · P_k` over distinct score thresholds, descending.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    let (mut tp, mut fp, mut ap) = (0u64, 0u64, 0.0);
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i] == 1).count() as u64;
        let prev = tp;
        tp += p;
        fp += g.len() as u64 - p;
        ap += (tp - prev) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
    }
    Ok(ap)
}

/// F1 of class `positive`. With no predicted and no true positives it is 1.
pub fn f1_class(pred: &[usize], truth: &[usize], positive: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(crate::error::usage_err("predictions and truth differ in length"));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok((2 * tp) as f64 / (2 * tp + fp + fn_) as f64)
}

/// Binary F1 with class 1 as positive.
pub fn f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    f1_class(pred, truth, 1)
}

/// Mean per-class F1 over the classes that occur in `pred` or `truth`.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    let present: Vec<usize> = (0..classes)
        .filter(|c| pred.contains(c) || truth.contains(c))
        .collect();
    if present.is_empty() {
        return Err(Error::UndefinedMetric("no samples".into()));
    }
    let mut sum = 0.0;
    for &c in &present {
        sum += f1_class(pred, truth, c)?;
    }
    Ok(sum / present.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: String,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub auroc: f64,
    pub auprc: f64,
    /// Mean eval-mode training objective.
    pub loss: f64,
    pub concept_f1: Vec<ConceptScore>,
}
