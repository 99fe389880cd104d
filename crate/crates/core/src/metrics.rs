//! Pixel-level anomaly metrics and closed-set mIoU.
//!
//! Higher scores mean more anomalous. Threshold sweeps are tie-inclusive:
//! a pixel is predicted outlier when `score >= threshold`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pooled per-pixel scores with binary labels (1 = outlier).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredPixels {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredPixels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Shape("labels must be binary".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Numeric("NaN score".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn extend(&mut self, other: &ScoredPixels) {
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    fn require_both(&self, metric: &str) -> Result<()> {
        if self.positives() == 0 || self.negatives() == 0 {
            return Err(Error::UndefinedMetric(format!("{metric} needs both outlier and inlier pixels")));
        }
        Ok(())
    }

    fn require_positives(&self, metric: &str) -> Result<()> {
        if self.positives() == 0 {
            return Err(Error::UndefinedMetric(format!("{metric} needs outlier pixels")));
        }
        Ok(())
    }

    /// Cumulative `(tp, fp)` after admitting each distinct score, from the
    /// highest threshold down.
    fn sweep(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_unstable_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap_or(Ordering::Equal));
        let mut out = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (k, &i) in order.iter().enumerate() {
            if self.labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            let last_of_tie = order.get(k + 1).map_or(true, |&j| self.scores[j] != self.scores[i]);
            if last_of_tie {
                out.push((tp, fp));
            }
        }
        out
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks.
pub fn auroc(sp: &ScoredPixels) -> Result<f64> {
    sp.require_both("AuROC")?;
    let mut order: Vec<usize> = (0..sp.len()).collect();
    order.sort_unstable_by(|&a, &b| sp.scores[a].partial_cmp(&sp.scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && sp.scores[order[end]] == sp.scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share their mean
        let midrank = (start + 1 + end) as f64 / 2.0;
        let pos = order[start..end].iter().filter(|&&i| sp.labels[i] == 1).count();
        rank_sum += midrank * pos as f64;
        start = end;
    }
    let (p, n) = (sp.positives() as f64, sp.negatives() as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise area under the precision-recall curve, `sum (R_k - R_{k-1}) P_k`.
pub fn auprc(sp: &ScoredPixels) -> Result<f64> {
    sp.require_positives("AuPRC")?;
    let p = sp.positives() as f64;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in sp.sweep() {
        let recall = tp as f64 / p;
        area += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(area)
}

/// False positive rate at the strictest threshold whose TPR reaches 0.95.
pub fn fpr_at_95tpr(sp: &ScoredPixels) -> Result<f64> {
    sp.require_both("FPR95")?;
    let (p, n) = (sp.positives() as f64, sp.negatives() as f64);
    let (_, fp) = sp
        .sweep()
        .into_iter()
        .find(|&(tp, _)| tp as f64 / p >= 0.95)
        .expect("the lowest threshold admits every pixel");
    Ok(fp as f64 / n)
}

/// Best F1 over all thresholds.
pub fn f1_star(sp: &ScoredPixels) -> Result<f64> {
    sp.require_positives("F1*")?;
    let p = sp.positives();
    Ok(sp
        .sweep()
        .into_iter()
        .map(|(tp, fp)| 2.0 * tp as f64 / (2 * tp + fp + (p - tp)) as f64)
        .fold(0.0, f64::max))
}

/// `(fpr, tpr)` points from the strictest threshold down, starting at the origin.
pub fn roc_curve(sp: &ScoredPixels) -> Result<Vec<(f64, f64)>> {
    sp.require_both("ROC")?;
    let (p, n) = (sp.positives() as f64, sp.negatives() as f64);
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(sp.sweep().into_iter().map(|(tp, fp)| (fp as f64 / n, tp as f64 / p)));
    Ok(pts)
}

/// `(recall, precision)` points from the strictest threshold down.
pub fn pr_curve(sp: &ScoredPixels) -> Result<Vec<(f64, f64)>> {
    sp.require_positives("PR")?;
    let p = sp.positives() as f64;
    Ok(sp.sweep().into_iter().map(|(tp, fp)| (tp as f64 / p, tp as f64 / (tp + fp) as f64)).collect())
}

/// Mean IoU over classes `1..=num_classes`; classes absent from both maps are
/// skipped and pixels whose ground truth equals `ignore_label` are dropped.
pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize, ignore_label: Option<u8>) -> Result<f64> {
    let per_class = class_iou(pred, gt, num_classes, ignore_label)?;
    let present: Vec<f64> = per_class.into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::UndefinedMetric("no class present in either map".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Per-class IoU, `None` for classes absent from both maps.
pub fn class_iou(pred: &[u8], gt: &[u8], num_classes: usize, ignore_label: Option<u8>) -> Result<Vec<Option<f64>>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    let mut tp = vec![0usize; num_classes + 1];
    let mut fp = vec![0usize; num_classes + 1];
    let mut fn_ = vec![0usize; num_classes + 1];
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore_label {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if p == g {
            if (1..=num_classes).contains(&p) {
                tp[p] += 1;
            }
            continue;
        }
        if (1..=num_classes).contains(&p) {
            fp[p] += 1;
        }
        if (1..=num_classes).contains(&g) {
            fn_[g] += 1;
        }
    }
    Ok((1..=num_classes)
        .map(|k| {
            let denom = tp[k] + fp[k] + fn_[k];
            (denom > 0).then(|| tp[k] as f64 / denom as f64)
        })
        .collect())
}

/// Anomaly metrics in the column order FPR95, AuPRC, AuROC, then F1*.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fpr95: f64,
    pub auprc: f64,
    pub auroc: f64,
    pub f1_star: f64,
    pub miou: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

impl MetricsReport {
    pub fn from_scores(sp: &ScoredPixels) -> Result<Self> {
        Ok(Self {
            fpr95: fpr_at_95tpr(sp)?,
            auprc: auprc(sp)?,
            auroc: auroc(sp)?,
            f1_star: f1_star(sp)?,
            miou: None,
            positives: sp.positives(),
            negatives: sp.negatives(),
        })
    }

    pub fn table_header() -> &'static str {
        "   FPR95    AuPRC    AuROC      F1*     mIoU"
    }

    /// Percentages, fixed order.
    pub fn table_row(&self) -> String {
        let miou = self.miou.map_or("       -".to_string(), |m| format!("{:8.2}", 100.0 * m));
        format!(
            "{:8.2} {:8.2} {:8.2} {:8.2} {}",
            100.0 * self.fpr95,
            100.0 * self.auprc,
            100.0 * self.auroc,
            100.0 * self.f1_star,
            miou
        )
    }
}
