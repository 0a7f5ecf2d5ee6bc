//! Classification metrics. Multi-class scores are macro averages; AUROC and
//! AUPRC are one-vs-rest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 6] = ["Accuracy", "Precision", "Recall", "F1", "AUROC", "AUPRC"];

    pub fn to_array(&self) -> [f64; 6] {
        [self.accuracy, self.precision, self.recall, self.f1, self.auroc, self.auprc]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        let [accuracy, precision, recall, f1, auroc, auprc] = v;
        Self {
            accuracy,
            precision,
            recall,
            f1,
            auroc,
            auprc,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::Metric(format!("need at least 2 classes, got {n_classes}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Contract(format!("label {bad} out of range for {n_classes} classes")));
    }
    Ok(())
}

/// Macro precision, recall and F1 (0/0 counts as 0).
pub fn macro_prf(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<(f64, f64, f64)> {
    if labels.len() != preds.len() {
        return Err(Error::Contract(format!(
            "{} labels but {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    check_labels(labels, n_classes)?;
    check_labels(preds, n_classes)?;
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for k in 0..n_classes {
        let tp = labels.iter().zip(preds).filter(|&(&l, &q)| l == k && q == k).count();
        let predicted = preds.iter().filter(|&&q| q == k).count();
        let actual = labels.iter().filter(|&&l| l == k).count();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        p += precision;
        r += recall;
        f += f1;
    }
    let k = n_classes as f64;
    Ok((p / k, r / k, f / k))
}

pub fn macro_f1(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<f64> {
    macro_prf(labels, preds, n_classes).map(|(_, _, f)| f)
}

/// Mann–Whitney AUROC: probability a positive outranks a negative, ties
/// counting one half. `None` if either side is empty.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks (1-based) over positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: mean over positives of the precision at their rank,
/// ranking by descending score with ties broken by lower index first.
/// `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / n_pos as f64)
}

fn one_vs_rest<F>(scores: &[Vec<f64>], labels: &[usize], n_classes: usize, what: &str, per_class: F) -> Result<f64>
where
    F: Fn(&[f64], &[bool]) -> Option<f64>,
{
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} score rows but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_labels(labels, n_classes)?;
    if let Some(row) = scores.iter().find(|r| r.len() != n_classes) {
        return Err(Error::Contract(format!("score row has {} columns, expected {n_classes}", row.len())));
    }
    let mut sum = 0.0;
    let mut counted = 0;
    for k in 0..n_classes {
        let column: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        if positive.iter().all(|&p| p) {
            continue;
        }
        if let Some(v) = per_class(&column, &positive) {
            sum += v;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Metric(format!("{what}: no class has both positives and negatives")));
    }
    Ok(sum / counted as f64)
}

/// Macro one-vs-rest AUROC over classes with both positives and negatives.
/// `scores` holds one probability row per sample.
pub fn auroc_ovr(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    one_vs_rest(scores, labels, n_classes, "AUROC", binary_auroc)
}

/// Macro one-vs-rest average precision, over the same classes as AUROC.
pub fn auprc_ovr(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    one_vs_rest(scores, labels, n_classes, "AUPRC", average_precision)
}

pub fn compute_metrics(labels: &[usize], preds: &[usize], scores: &[Vec<f64>], n_classes: usize) -> Result<Metrics> {
    let (precision, recall, f1) = macro_prf(labels, preds, n_classes)?;
    if labels.is_empty() {
        return Err(Error::Metric("no samples to score".into()));
    }
    let correct = labels.iter().zip(preds).filter(|(l, p)| l == p).count();
    Ok(Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        precision,
        recall,
        f1,
        auroc: auroc_ovr(scores, labels, n_classes)?,
        auprc: auprc_ovr(scores, labels, n_classes)?,
    })
}

/// Per-seed metrics with their element-wise mean and population std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean: Metrics,
    pub std: Metrics,
    pub per_seed: Vec<Metrics>,
}

pub fn aggregate_seeds(reports: &[Metrics]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::Contract("cannot aggregate zero reports".into()));
    }
    let n = reports.len() as f64;
    let mut mean = [0.0; 6];
    for r in reports {
        mean.iter_mut().zip(r.to_array()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 6];
    for r in reports {
        for (i, v) in r.to_array().into_iter().enumerate() {
            var[i] += (v - mean[i]) * (v - mean[i]);
        }
    }
    Ok(MetricsReport {
        mean: Metrics::from_array(mean),
        std: Metrics::from_array(var.map(|v| (v / n).sqrt())),
        per_seed: reports.to_vec(),
    })
}
