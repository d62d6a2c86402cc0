//! Ranking and classification metrics.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Area under the ROC curve from the Mann-Whitney rank statistic:
/// `P(score_pos > score_neg) + ½·P(tie)`. `positive` marks fakes.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|s| s.1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    if let Some((s, _)) = scores.iter().find(|s| s.0.is_nan()) {
        return Err(Error::Metric(format!("NaN score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));

    // Sum of 1-based mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| scores[k].1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of samples where `score > 0.5` matches the label.
pub fn accuracy(scores: &[(f64, bool)]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores.iter().filter(|(s, y)| (*s > 0.5) == *y).count();
    hits as f64 / scores.len() as f64
}

/// Per-sample binary cross-entropy with the tape's clamp.
pub fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(crate::autograd::BCE_EPS, 1.0 - crate::autograd::BCE_EPS);
    -(target * math::ln(p) + (1.0 - target) * math::ln(1.0 - p))
}
