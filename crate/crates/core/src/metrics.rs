//! Classification metrics: balanced accuracy, Cohen's kappa, weighted F1,
//! and for binary tasks AUROC and AUC-PR.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Counts indexed `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: &[usize], preds: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(Error::Param(format!(
                "{} labels but {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&y, &p) in labels.iter().zip(preds) {
            if y >= classes || p >= classes {
                return Err(Error::Param(format!("class index {} out of range for {classes} classes", y.max(p))));
            }
            counts[y][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::Param("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn predicted(&self) -> Vec<u64> {
        (0..self.classes()).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }
}

/// Mean recall over the classes present in the labels. Absent classes are
/// skipped with a warning.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let support = cm.support();
    let mut recalls = Vec::new();
    for (c, &s) in support.iter().enumerate() {
        if s == 0 {
            log::warn!("class {c} has no samples; left out of balanced accuracy");
            continue;
        }
        recalls.push(cm.count(c, c) as f64 / s as f64);
    }
    if recalls.is_empty() {
        return Err(Error::Data("balanced accuracy of an empty label set".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// `(p_o - p_e) / (1 - p_e)`. When chance agreement is already certain the
/// statistic carries no information and is reported as 0.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> f64 {
    let n = cm.total() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let po = (0..cm.classes()).map(|c| cm.count(c, c)).sum::<u64>() as f64 / n;
    let pe: f64 = cm
        .support()
        .iter()
        .zip(cm.predicted())
        .map(|(&a, b)| (a as f64 / n) * (b as f64 / n))
        .sum();
    if pe >= 1.0 {
        return 0.0;
    }
    (po - pe) / (1.0 - pe)
}

/// Support-weighted mean of per-class F1; a class never predicted has F1 0.
pub fn weighted_f1(cm: &ConfusionMatrix) -> f64 {
    let support = cm.support();
    let predicted = cm.predicted();
    let n = cm.total() as f64;
    if n == 0.0 {
        return 0.0;
    }
    (0..cm.classes())
        .map(|c| {
            let tp = cm.count(c, c) as f64;
            let denom = (support[c] + predicted[c]) as f64;
            let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
            f1 * support[c] as f64 / n
        })
        .sum()
}

/// Distinct scores in decreasing order with (positives, negatives) at each.
fn score_groups(positive: &[bool], scores: &[f64]) -> Result<(Vec<(u64, u64)>, u64, u64)> {
    if positive.len() != scores.len() {
        return Err(Error::Param(format!("{} labels but {} scores", positive.len(), scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Param("scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last = None;
    for i in order {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().unwrap();
        if positive[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    let pos: u64 = groups.iter().map(|g| g.0).sum();
    let neg: u64 = groups.iter().map(|g| g.1).sum();
    if pos == 0 || neg == 0 {
        return Err(Error::Data("ranking metrics need both positive and negative samples".into()));
    }
    Ok((groups, pos, neg))
}

/// Trapezoidal area under the ROC curve; tied scores form a diagonal
/// segment, which counts each tied positive/negative pair as one half.
pub fn auroc(positive: &[bool], scores: &[f64]) -> Result<f64> {
    let (groups, pos, neg) = score_groups(positive, scores)?;
    let mut area = 0.0;
    let mut tp = 0u64;
    for (gp, gn) in groups {
        area += gn as f64 * (tp as f64 + 0.5 * gp as f64);
        tp += gp;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// Area under the precision-recall curve with step interpolation: each
/// recall increment is weighted by the precision at that threshold.
pub fn auc_pr(positive: &[bool], scores: &[f64]) -> Result<f64> {
    let (groups, pos, _) = score_groups(positive, scores)?;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area = 0.0;
    for (gp, gn) in groups {
        tp += gp;
        fp += gn;
        if gp > 0 {
            area += (gp as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub balanced_accuracy: f64,
    pub kappa: f64,
    pub weighted_f1: f64,
    pub auroc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub confusion: ConfusionMatrix,
}

/// `scores` holds the positive-class score per sample and is only used for
/// two-class problems. Ranking metrics are left empty, with a warning, when
/// the labels contain a single class.
pub fn compute_metrics(labels: &[usize], preds: &[usize], scores: Option<&[f64]>, classes: usize) -> Result<MetricReport> {
    let confusion = ConfusionMatrix::new(labels, preds, classes)?;
    let (mut auroc_v, mut auc_pr_v) = (None, None);
    if let (2, Some(s)) = (classes, scores) {
        let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        match auroc(&positive, s) {
            Ok(a) => {
                auroc_v = Some(a);
                auc_pr_v = Some(auc_pr(&positive, s)?);
            }
            Err(Error::Data(m)) => log::warn!("{m}; AUROC and AUC-PR omitted"),
            Err(e) => return Err(e),
        }
    }
    Ok(MetricReport {
        balanced_accuracy: balanced_accuracy(&confusion)?,
        kappa: cohen_kappa(&confusion),
        weighted_f1: weighted_f1(&confusion),
        auroc: auroc_v,
        auc_pr: auc_pr_v,
        confusion,
    })
}

impl MetricReport {
    /// `key: value` lines followed by the confusion matrix, one row per
    /// true class.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "balanced_accuracy: {:.6}", self.balanced_accuracy).unwrap();
        writeln!(s, "kappa: {:.6}", self.kappa).unwrap();
        writeln!(s, "weighted_f1: {:.6}", self.weighted_f1).unwrap();
        if let Some(a) = self.auroc {
            writeln!(s, "auroc: {a:.6}").unwrap();
        }
        if let Some(a) = self.auc_pr {
            writeln!(s, "auc_pr: {a:.6}").unwrap();
        }
        let support: Vec<String> = self.confusion.support().iter().map(|c| c.to_string()).collect();
        writeln!(s, "support: {}", support.join(",")).unwrap();
        writeln!(s, "confusion:").unwrap();
        for row in self.confusion.rows() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(s, "{}", cells.join("\t")).unwrap();
        }
        s
    }
}
