//! Binary classification metrics: confusion counts, accuracy, sensitivity,
//! specificity, and ROC/AUC. Undefined metrics (zero denominators,
//! single-class AUC) are explicit `None` markers, never silent numbers.
//! All computation here is f64 regardless of the model's scalar type.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// ROC polyline from (0,0) to (1,1); tied scores advance TP and FP together
/// so ties appear as diagonal segments.
#[derive(Clone, Debug)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::input(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::input("no samples to evaluate"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::input(format!("label {} is not binary", bad)));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::input(format!("non-finite score {}", bad)));
    }
    Ok(())
}

/// Count outcomes under the convention "score >= threshold predicts 1".
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_inputs(scores, labels)?;
    let mut c = ConfusionCounts { true_pos: 0, true_neg: 0, false_pos: 0, false_neg: 0 };
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (pred, l) {
            (true, 1) => c.true_pos += 1,
            (true, 0) => c.false_pos += 1,
            (false, 1) => c.false_neg += 1,
            (false, 0) => c.true_neg += 1,
            _ => unreachable!(),
        }
    }
    Ok(c)
}

/// Accuracy (TP+TN)/total, sensitivity TP/(TP+FN), specificity TN/(TN+FP).
/// A zero denominator yields `None` for that metric.
pub fn binary_metrics(c: &ConfusionCounts) -> BinaryMetrics {
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    BinaryMetrics {
        accuracy: ratio(c.true_pos + c.true_neg, c.total()),
        sensitivity: ratio(c.true_pos, c.true_pos + c.false_neg),
        specificity: ratio(c.true_neg, c.true_neg + c.false_pos),
    }
}

/// Indices of `scores` sorted descending, grouped by exactly-equal score.
fn score_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// ROC curve over all distinct thresholds, or `None` when only one class
/// is present (rates would be undefined).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Option<RocCurve>> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for group in score_groups(scores) {
        for i in group {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(Some(RocCurve { points }))
}

/// Area under the ROC curve with half-credit for ties — identical to the
/// Mann–Whitney statistic. Counted in integers and divided once at the
/// end, so results are exact. `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    // Ascending walk: each positive earns 2 per strictly-lower negative
    // and 1 per tied negative; normalize by 2·P·N.
    let mut groups = score_groups(scores);
    groups.reverse();
    let mut twice_u = 0u64;
    let mut neg_below = 0u64;
    for group in groups {
        let p = group.iter().filter(|&&i| labels[i] == 1).count() as u64;
        let n = group.len() as u64 - p;
        twice_u += p * (2 * neg_below + n);
        neg_below += n;
    }
    Ok(Some(twice_u as f64 / (2 * pos * neg) as f64))
}
