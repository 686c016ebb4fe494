//! Binary-classification evaluation: confusion counts, accuracy, per-class
//! precision/recall/F1, macro and micro F1, ROC curve, and AUC.
//!
//! Ratios that come out 0/0 (say, precision over a class that was never
//! predicted) are reported as `None` and excluded from the macro and micro
//! averages, with a note in `warnings`; coercing them to 0 would silently
//! drag the averages down. AUC is the Mann-Whitney probability that a random
//! positive example outscores a random negative one, with ties counting half;
//! it equals the trapezoidal area under the ROC curve.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{what} and labels differ in length: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("cannot compute metrics over zero examples")]
    Empty,
    #[error("{what}[{index}] is {value}, expected a 0/1 class")]
    BadClass {
        what: &'static str,
        index: usize,
        value: u8,
    },
    #[error("score[{index}] is not finite")]
    NonFiniteScore { index: usize },
    #[error("need both classes present, got {n1} positives and {n0} negatives")]
    SingleClass { n0: usize, n1: usize },
    #[error(
        "confusion counts imply {implied_n1} positives and {implied_n0} negatives, \
         caller said {n1} and {n0}"
    )]
    InconsistentCounts {
        implied_n0: usize,
        implied_n1: usize,
        n0: usize,
        n1: usize,
    },
}

type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    /// Actual negatives.
    pub fn n0(&self) -> usize {
        self.true_neg + self.false_pos
    }

    /// Actual positives.
    pub fn n1(&self) -> usize {
        self.true_pos + self.false_neg
    }
}

/// Everything derived from one scored prediction set. `None` marks a metric
/// whose defining ratio was 0/0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision0: Option<f64>,
    pub precision1: Option<f64>,
    pub recall0: Option<f64>,
    pub recall1: Option<f64>,
    pub f1_0: Option<f64>,
    pub f1_1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub micro_f1: Option<f64>,
    /// (FPR, TPR) points from (0,0) to (1,1); empty when AUC is undefined.
    pub roc: Vec<(f64, f64)>,
    pub auc: Option<f64>,
    pub warnings: Vec<String>,
}

fn check_classes(what: &'static str, values: &[u8]) -> Result<()> {
    for (index, &value) in values.iter().enumerate() {
        if value > 1 {
            return Err(MetricsError::BadClass { what, index, value });
        }
    }
    Ok(())
}

/// Tally predictions against labels. Positive class is 1.
pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionCounts> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            what: "predictions",
            left: preds.len(),
            right: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_classes("predictions", preds)?;
    check_classes("labels", labels)?;
    let mut c = ConfusionCounts {
        true_pos: 0,
        true_neg: 0,
        false_pos: 0,
        false_neg: 0,
    };
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (1, 1) => c.true_pos += 1,
            (0, 0) => c.true_neg += 1,
            (1, 0) => c.false_pos += 1,
            _ => c.false_neg += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

fn f1_of(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    }
}

/// Threshold-level metrics from counts. `n0`/`n1` are the actual class sizes
/// and must agree with the counts. ROC and AUC are left empty; see
/// [`full_report`].
pub fn scores(counts: ConfusionCounts, n0: usize, n1: usize) -> Result<MetricsReport> {
    if counts.n0() != n0 || counts.n1() != n1 {
        return Err(MetricsError::InconsistentCounts {
            implied_n0: counts.n0(),
            implied_n1: counts.n1(),
            n0,
            n1,
        });
    }
    let n = counts.total();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let mut warnings = Vec::new();
    let accuracy = (counts.true_pos + counts.true_neg) as f64 / n as f64;
    let precision1 = ratio(counts.true_pos, counts.true_pos + counts.false_pos);
    let recall1 = ratio(counts.true_pos, n1);
    let precision0 = ratio(counts.true_neg, counts.true_neg + counts.false_neg);
    let recall0 = ratio(counts.true_neg, n0);
    let f1_1 = f1_of(precision1, recall1);
    let f1_0 = f1_of(precision0, recall0);
    for (name, value) in [
        ("precision0", precision0),
        ("precision1", precision1),
        ("recall0", recall0),
        ("recall1", recall1),
        ("f1_0", f1_0),
        ("f1_1", f1_1),
    ] {
        if value.is_none() {
            warnings.push(format!("{name} is 0/0; excluded from averages"));
        }
    }

    // Macro: plain mean of the defined per-class F1s. Micro: the class-size
    // weighted mean (N0*F1_0 + N1*F1_1) / N, dropping undefined terms and
    // their weights.
    let macro_f1 = match (f1_0, f1_1) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    };
    let mut num = 0.0;
    let mut den = 0usize;
    if let Some(a) = f1_0 {
        num += n0 as f64 * a;
        den += n0;
    }
    if let Some(b) = f1_1 {
        num += n1 as f64 * b;
        den += n1;
    }
    let micro_f1 = if den == 0 { None } else { Some(num / den as f64) };

    Ok(MetricsReport {
        counts,
        accuracy,
        precision0,
        precision1,
        recall0,
        recall1,
        f1_0,
        f1_1,
        macro_f1,
        micro_f1,
        roc: Vec::new(),
        auc: None,
        warnings,
    })
}

fn check_scored(p_positive: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if p_positive.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            what: "scores",
            left: p_positive.len(),
            right: labels.len(),
        });
    }
    if p_positive.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_classes("labels", labels)?;
    for (index, &s) in p_positive.iter().enumerate() {
        if !s.is_finite() {
            return Err(MetricsError::NonFiniteScore { index });
        }
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(MetricsError::SingleClass { n0, n1 });
    }
    Ok((n0, n1))
}

/// ROC points (FPR, TPR), one per distinct score plus the (0,0) start: the
/// threshold sweeps from above the maximum score downward, and all examples
/// sharing a score cross together.
pub fn roc_curve(p_positive: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (n0, n1) = check_scored(p_positive, labels)?;
    let mut order: Vec<usize> = (0..p_positive.len()).collect();
    order.sort_by(|&a, &b| p_positive[b].total_cmp(&p_positive[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let score = p_positive[order[i]];
        while i < order.len() && p_positive[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n0 as f64, tp as f64 / n1 as f64));
    }
    Ok(points)
}

/// AUC as the Mann-Whitney probability, computed from midranks in
/// O(n log n): rank all scores ascending (ties share their average rank);
/// AUC = (sum of positive ranks - n1(n1+1)/2) / (n0 n1).
pub fn auc(p_positive: &[f64], labels: &[u8]) -> Result<f64> {
    let (n0, n1) = check_scored(p_positive, labels)?;
    let n = p_positive.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p_positive[a].total_cmp(&p_positive[b]));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let score = p_positive[order[i]];
        let mut j = i;
        while j < n && p_positive[order[j]] == score {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged over the tie group
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n0 as f64 * n1 as f64))
}

/// Complete report: confusion metrics plus ROC/AUC. A single-class label set
/// leaves ROC empty and AUC `None` with a warning rather than failing.
pub fn full_report(preds: &[u8], p_positive: &[f64], labels: &[u8]) -> Result<MetricsReport> {
    let counts = confusion(preds, labels)?;
    let mut report = scores(counts, counts.n0(), counts.n1())?;
    match auc(p_positive, labels) {
        Ok(a) => {
            report.auc = Some(a);
            report.roc = roc_curve(p_positive, labels)?;
        }
        Err(MetricsError::SingleClass { .. }) => {
            report
                .warnings
                .push("AUC undefined: only one class present in labels".into());
        }
        Err(e) => return Err(e),
    }
    Ok(report)
}
