use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::StatsError;
use crate::labels::ClassDistribution;

/// Slack when comparing a label's top vote share against the threshold, so
/// that a threshold written as 0.667 keeps 2-of-3 consensus frames.
pub const THRESHOLD_TOLERANCE: f64 = 1e-3;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn new(counts: [[u64; 3]; 3]) -> Self {
        Self { counts }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn n(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> [u64; 3] {
        self.counts.map(|r| r.iter().sum())
    }

    pub fn col_sums(&self) -> [u64; 3] {
        std::array::from_fn(|j| self.counts.iter().map(|r| r[j]).sum())
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|k| self.counts[k][k]).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.n();
        (n > 0).then(|| self.trace() as f64 / n as f64)
    }

    /// `true\predicted` header followed by one row per true class.
    pub fn to_csv(&self, symbols: [&str; 3]) -> String {
        let mut s = format!("true\\predicted,{},{},{}\n", symbols[0], symbols[1], symbols[2]);
        for (k, row) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", symbols[k], row[0], row[1], row[2]);
        }
        s
    }
}

/// One-vs-rest metrics for one class; `None` marks an undefined value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: u64,
}

pub fn precision_recall_f1(matrix: &ConfusionMatrix) -> Result<[ClassMetrics; 3], StatsError> {
    if matrix.n() == 0 {
        return Err(StatsError::Empty("confusion matrix"));
    }
    let rows = matrix.row_sums();
    let cols = matrix.col_sums();
    Ok(std::array::from_fn(|k| {
        let tp = matrix.counts[k][k] as f64;
        let precision = (cols[k] > 0).then(|| tp / cols[k] as f64);
        let recall = (rows[k] > 0).then(|| tp / rows[k] as f64);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            support: rows[k],
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub total: usize,
    pub retained: usize,
    pub excluded: usize,
    /// `None` when nothing was retained.
    pub accuracy: Option<f64>,
    pub confusion: ConfusionMatrix,
    /// Empty when nothing was retained.
    pub per_class: Vec<ClassMetrics>,
    /// Mean of the defined per-class F1 values.
    pub macro_f1: Option<f64>,
}

/// Scores argmax predictions against consensus labels, keeping only samples
/// whose top vote share reaches `threshold`.
pub fn accuracy_at_threshold(
    predictions: &[usize],
    labels: &[ClassDistribution],
    threshold: f64,
) -> Result<MetricsReport, StatsError> {
    if predictions.len() != labels.len() {
        return Err(StatsError::Length(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&class) = predictions.iter().find(|&&p| p >= 3) {
        return Err(StatsError::BadClass { class, categories: 3 });
    }
    let mut confusion = ConfusionMatrix::default();
    for (&p, l) in predictions.iter().zip(labels) {
        if l.max() >= threshold - THRESHOLD_TOLERANCE {
            confusion.add(l.argmax(), p);
        }
    }
    let retained = confusion.n() as usize;
    let per_class = precision_recall_f1(&confusion).map(Vec::from).unwrap_or_default();
    let f1s: Vec<f64> = per_class.iter().filter_map(|m| m.f1).collect();
    Ok(MetricsReport {
        threshold,
        total: labels.len(),
        retained,
        excluded: labels.len() - retained,
        accuracy: confusion.accuracy(),
        confusion,
        per_class,
        macro_f1: (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// A correct, B wrong.
    pub b: u64,
    /// A wrong, B correct.
    pub c: u64,
    /// Continuity-corrected statistic; `None` when `b + c = 0`.
    pub chi_square_cc: Option<f64>,
    /// Two-sided exact binomial p-value.
    pub p_exact: f64,
}

pub fn mcnemar(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemar, StatsError> {
    if correct_a.len() != correct_b.len() {
        return Err(StatsError::Length(format!("{} vs {} outcomes", correct_a.len(), correct_b.len())));
    }
    let b = correct_a.iter().zip(correct_b).filter(|(a, b)| **a && !**b).count() as u64;
    let c = correct_a.iter().zip(correct_b).filter(|(a, b)| !**a && **b).count() as u64;
    Ok(mcnemar_counts(b, c))
}

pub fn mcnemar_counts(b: u64, c: u64) -> McNemar {
    let n = b + c;
    if n == 0 {
        return McNemar {
            b,
            c,
            chi_square_cc: None,
            p_exact: 1.0,
        };
    }
    let d = (b as f64 - c as f64).abs() - 1.0;
    let chi = d.max(0.0).powi(2) / n as f64;
    // P(X ≤ m), X ~ Bin(n, ½), summed in log space from the largest term down
    let m = b.min(c);
    let mut log_c = vec![0.0f64; m as usize + 1];
    for k in 1..=m as usize {
        log_c[k] = log_c[k - 1] + ((n - k as u64 + 1) as f64 / k as f64).ln();
    }
    let top = log_c[m as usize];
    let tail: f64 = log_c.iter().rev().map(|l| (l - top).exp()).sum();
    let p = 2.0 * (top - n as f64 * std::f64::consts::LN_2 + tail.ln()).exp();
    McNemar {
        b,
        c,
        chi_square_cc: Some(chi),
        p_exact: p.min(1.0),
    }
}

/// `angle,p0,p1,p2` rows for external plotting.
pub fn plot_data_csv(angles: &[f64], probs: &[ClassDistribution], symbols: [&str; 3]) -> String {
    let mut s = format!("angle_deg,{},{},{}\n", symbols[0], symbols[1], symbols[2]);
    for (a, p) in angles.iter().zip(probs) {
        let [x, y, z] = p.probs();
        let _ = writeln!(s, "{a},{x},{y},{z}");
    }
    s
}
