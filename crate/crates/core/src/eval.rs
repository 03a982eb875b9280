//! Area-matching AUC: ROC AUC of match probabilities against IoU labels at
//! several overlap thresholds.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Serialize, Serializer};

use crate::error::{shape_mismatch, Error, Result};
use crate::geometry::GtMatrix;

pub const THRESHOLDS: [f64; 4] = [0.2, 0.3, 0.4, 0.5];

/// ROC AUC by the Mann-Whitney rank statistic, ties sharing their average rank.
///
/// `None` when either class is empty.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share their mean
        let avg = (start + 1 + end) as f64 / 2.0;
        rank_sum += avg * order[start..end].iter().filter(|&&k| labels[k]).count() as f64;
        start = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn nan_as_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AucEntry {
    pub threshold: f64,
    /// NaN when no pair had both classes at this threshold.
    #[serde(serialize_with = "nan_as_null")]
    pub auc: f64,
    pub pairs: usize,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AucReport {
    pub entries: Vec<AucEntry>,
}

impl AucReport {
    /// AUC at `threshold`, NaN if it was not evaluated or had no usable pair.
    pub fn auc_at(&self, threshold: f64) -> f64 {
        self.entries
            .iter()
            .find(|e| e.threshold == threshold)
            .map_or(f64::NAN, |e| e.auc)
    }

    pub fn table(&self) -> String {
        let mut out = String::from("threshold      auc  pairs  positives  negatives\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:>9.2} {:>8.4} {:>6} {:>10} {:>10}",
                e.threshold, e.auc, e.pairs, e.positives, e.negatives
            );
        }
        out
    }
}

/// Pools every `(pair, i, j)` entry; labels are `gt >= t`.
///
/// A pair with no positive or no negative at `t` is left out of that
/// threshold's pool.
pub fn auc_area_matching(probs: &[&Array2<f64>], gts: &[&GtMatrix], thresholds: &[f64]) -> Result<AucReport> {
    if probs.len() != gts.len() {
        return Err(shape_mismatch("pairs", &[gts.len()], &[probs.len()]));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) || thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::InvalidConfig("thresholds must be ascending and inside (0, 1)".into()));
    }
    for (p, g) in probs.iter().zip(gts) {
        if p.dim() != g.dim() {
            let (m, n) = g.dim();
            return Err(shape_mismatch("probabilities vs ground truth", &[m, n], p.shape()));
        }
    }
    let entries = thresholds
        .iter()
        .map(|&t| {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            let mut pairs = 0;
            for (p, g) in probs.iter().zip(gts) {
                let lab: Vec<bool> = g.values().iter().map(|&v| v >= t).collect();
                let pos = lab.iter().filter(|&&l| l).count();
                if pos == 0 || pos == lab.len() {
                    continue;
                }
                pairs += 1;
                scores.extend(p.iter().copied());
                labels.extend(lab);
            }
            let positives = labels.iter().filter(|&&l| l).count();
            AucEntry {
                threshold: t,
                auc: roc_auc(&scores, &labels).unwrap_or(f64::NAN),
                pairs,
                positives,
                negatives: labels.len() - positives,
            }
        })
        .collect();
    Ok(AucReport { entries })
}
