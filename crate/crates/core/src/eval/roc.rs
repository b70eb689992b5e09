//! ROC curves over binary labels (1 = positive) and their area.

use super::EvalError;

/// Points from (0, 0) to (1, 1), both coordinates non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    points: Vec<(f64, f64)>,
}

impl RocCurve {
    /// Validates the curve invariants.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, EvalError> {
        let bad = |m: &str| Err(EvalError::BadCurve(m.to_string()));
        if points.len() < 2 {
            return bad("fewer than two points");
        }
        if points[0] != (0.0, 0.0) || points[points.len() - 1] != (1.0, 1.0) {
            return bad("curve must run from (0,0) to (1,1)");
        }
        for w in points.windows(2) {
            if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
                return bad("coordinates must be non-decreasing");
            }
        }
        if points
            .iter()
            .any(|&(x, y)| !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y))
        {
            return bad("coordinates outside [0, 1]");
        }
        Ok(RocCurve { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::BadLabel(l));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NanScore);
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    Ok((pos, neg))
}

/// Sweeps the threshold down over the distinct scores; tied scores move the
/// curve in one (possibly diagonal) step.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve, EvalError> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    RocCurve::new(points)
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points()
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting
/// one half. Brute force over all pairs.
pub fn concordance_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut twice = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            twice += match si.partial_cmp(&sj).expect("no NaN") {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}
