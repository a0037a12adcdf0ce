//! Evaluation metrics for sentiment regression and class prediction.
//!
//! Accuracies and F1 scores are percentages. Binary F1 and multi-class F1
//! are support-weighted averages of the per-class F1 scores.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::Task;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub mae: Option<f64>,
    pub corr: Option<f64>,
    /// Negative vs non-negative over all samples.
    pub acc2_nonneg: Option<f64>,
    /// Negative vs positive over samples with a nonzero label.
    pub acc2_pos: Option<f64>,
    pub f1_nonneg: Option<f64>,
    pub f1_pos: Option<f64>,
    pub acc7: Option<f64>,
    pub acc_c: Option<f64>,
    pub f1_weighted: Option<f64>,
}

impl MetricReport {
    pub const NAMES: [&'static str; 9] =
        ["mae", "corr", "acc2_nonneg", "acc2_pos", "f1_nonneg", "f1_pos", "acc7", "acc_c", "f1_weighted"];

    fn fields(&self) -> [Option<f64>; 9] {
        [
            self.mae,
            self.corr,
            self.acc2_nonneg,
            self.acc2_pos,
            self.f1_nonneg,
            self.f1_pos,
            self.acc7,
            self.acc_c,
            self.f1_weighted,
        ]
    }

    fn from_fields(f: [Option<f64>; 9]) -> Self {
        Self {
            mae: f[0],
            corr: f[1],
            acc2_nonneg: f[2],
            acc2_pos: f[3],
            f1_nonneg: f[4],
            f1_pos: f[5],
            acc7: f[6],
            acc_c: f[7],
            f1_weighted: f[8],
        }
    }

    /// Present metrics in [`Self::NAMES`] order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        Self::NAMES.iter().zip(self.fields()).filter_map(|(n, v)| v.map(|v| (*n, v))).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|n| *n == name).and_then(|i| self.fields()[i])
    }

    /// Field-wise arithmetic mean. A metric is kept only if every report has it.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            bail!(Validation, "cannot average zero metric reports");
        }
        let mut out = [None; 9];
        for (i, slot) in out.iter_mut().enumerate() {
            let vals: Option<Vec<f64>> = reports.iter().map(|r| r.fields()[i]).collect();
            *slot = vals.map(|v| v.iter().sum::<f64>() / v.len() as f64);
        }
        Ok(Self::from_fields(out))
    }

    /// The score used to pick the best epoch; larger is better.
    pub fn selection_score(&self, task: Task) -> f64 {
        match task {
            Task::Regression => -self.mae.unwrap_or(f64::INFINITY),
            Task::Classification { .. } => self.acc_c.unwrap_or(f64::NEG_INFINITY),
        }
    }
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.is_empty() || x.len() != y.len() {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0)
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    100.0 * pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Support-weighted F1 over classes `0..classes`, as a percentage.
pub fn weighted_f1(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..classes {
        let support = truth.iter().filter(|&&t| t == c).count();
        if support == 0 {
            continue;
        }
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        total += f1 * support as f64;
    }
    100.0 * total / truth.len() as f64
}

/// Seven-way bucket of a sentiment score: nearest integer in `[-3, 3]`.
pub fn sentiment_class(v: f64) -> i64 {
    libm::round(v.clamp(-3.0, 3.0)) as i64
}

/// `predictions` are scores for regression and class indices for classification.
pub fn compute_metrics(predictions: &[f64], labels: &[f64], task: Task) -> Result<MetricReport> {
    if labels.is_empty() {
        bail!(Validation, "no samples to evaluate");
    }
    if predictions.len() != labels.len() {
        bail!(Validation, "{} predictions for {} labels", predictions.len(), labels.len());
    }
    if predictions.iter().chain(labels).any(|v| !v.is_finite()) {
        bail!(Validation, "non-finite prediction or label");
    }
    match task {
        Task::Regression => {
            let n = labels.len() as f64;
            let mae = predictions.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
            let corr = pearson(predictions, labels);
            let nonneg = |v: f64| usize::from(v >= 0.0);
            let p_nn: Vec<usize> = predictions.iter().map(|&p| nonneg(p)).collect();
            let y_nn: Vec<usize> = labels.iter().map(|&y| nonneg(y)).collect();
            let nonzero: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0.0).collect();
            let p_pos: Vec<usize> = nonzero.iter().map(|&i| usize::from(predictions[i] > 0.0)).collect();
            let y_pos: Vec<usize> = nonzero.iter().map(|&i| usize::from(labels[i] > 0.0)).collect();
            let (acc2_pos, f1_pos) = if nonzero.is_empty() {
                (None, None)
            } else {
                (Some(accuracy(&p_pos, &y_pos)), Some(weighted_f1(&p_pos, &y_pos, 2)))
            };
            let p7: Vec<usize> = predictions.iter().map(|&p| (sentiment_class(p) + 3) as usize).collect();
            let y7: Vec<usize> = labels.iter().map(|&y| (sentiment_class(y) + 3) as usize).collect();
            Ok(MetricReport {
                mae: Some(mae),
                corr: Some(corr),
                acc2_nonneg: Some(accuracy(&p_nn, &y_nn)),
                acc2_pos,
                f1_nonneg: Some(weighted_f1(&p_nn, &y_nn, 2)),
                f1_pos,
                acc7: Some(accuracy(&p7, &y7)),
                ..MetricReport::default()
            })
        }
        Task::Classification { num_classes } => {
            let to_class = |v: f64| -> Result<usize> {
                if v < 0.0 || libm::trunc(v) != v || v >= num_classes as f64 {
                    bail!(Validation, "{v} is not a class index below {num_classes}");
                }
                Ok(v as usize)
            };
            let p: Vec<usize> = predictions.iter().map(|&v| to_class(v)).collect::<Result<_>>()?;
            let y: Vec<usize> = labels.iter().map(|&v| to_class(v)).collect::<Result<_>>()?;
            Ok(MetricReport {
                acc_c: Some(accuracy(&p, &y)),
                f1_weighted: Some(weighted_f1(&p, &y, num_classes)),
                ..MetricReport::default()
            })
        }
    }
}
