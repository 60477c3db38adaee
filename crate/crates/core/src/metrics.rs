//! Detection, classification and grounding metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{0} needs both positive and negative labels")]
    SingleClass(&'static str),
    #[error("{what}: {left} vs {right} entries")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("non-finite score")]
    NonFinite,
}

type Result<T> = std::result::Result<T, MetricsError>;

fn check(what: &'static str, scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            what,
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass(what));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the Mann-Whitney statistic: ties between a
/// positive and a negative count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check("auc", scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Equal error rate with its threshold. `fpr` and `fnr` are the rates at the
/// reported (interpolated) operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub rate: f64,
    pub threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
}

/// ROC operating points for "positive iff score >= threshold", from the
/// strictest threshold down: `(threshold, fpr, fnr)`. The first point accepts
/// nothing.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>> {
    let (pos, neg) = check("roc", scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let top = scores[order[0]];
    let mut pts = vec![(top + 1.0, 0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((s, fp as f64 / neg as f64, 1.0 - tp as f64 / pos as f64));
    }
    Ok(pts)
}

pub fn eer(scores: &[f64], labels: &[bool]) -> Result<Eer> {
    let pts = roc_points(scores, labels)?;
    // fpr - fnr runs from -1 at the first point to +1 at the last
    let k = pts.iter().position(|p| p.1 - p.2 >= 0.0).expect("last point has fnr 0");
    let (t1, fpr1, fnr1) = pts[k];
    let d1 = fpr1 - fnr1;
    if d1 == 0.0 {
        // any threshold down to the next distinct score gives this point
        let threshold = pts.get(k + 1).map_or(t1, |p| (t1 + p.0) / 2.0);
        return Ok(Eer {
            rate: fpr1,
            threshold,
            fpr: fpr1,
            fnr: fnr1,
        });
    }
    let (t0, fpr0, fnr0) = pts[k - 1];
    let d0 = fpr0 - fnr0;
    let a = d0 / (d0 - d1);
    let fpr = fpr0 + a * (fpr1 - fpr0);
    let fnr = fnr0 + a * (fnr1 - fnr0);
    Ok(Eer {
        rate: (fpr + fnr) / 2.0,
        threshold: t0 + a * (t1 - t0),
        fpr,
        fnr,
    })
}

pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    hits as f64 / scores.len() as f64
}

/// Descending by score; ties keep input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Mean of precision at the rank of each positive. Tied scores keep input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            what: "average_precision",
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(MetricsError::SingleClass("average_precision"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

fn f1(tp: usize, fp: usize, fneg: usize) -> f64 {
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fneg > 0 {
        tp as f64 / (tp + fneg) as f64
    } else {
        0.0
    };
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiLabelMetrics {
    /// `None` when no class has a positive.
    pub map: Option<f64>,
    pub cf1: Option<f64>,
    pub of1: f64,
    /// Classes left out of mAP and CF1 for lack of positives.
    pub skipped_classes: usize,
}

/// mAP, per-class-averaged F1 and micro F1 at threshold 0.5. Rows are samples.
pub fn multilabel_metrics<const K: usize>(scores: &[[f64; K]], labels: &[[bool; K]]) -> Result<MultiLabelMetrics> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            what: "multilabel_metrics",
            left: scores.len(),
            right: labels.len(),
        });
    }
    let mut aps = Vec::new();
    let mut f1s = Vec::new();
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for k in 0..K {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[k]).collect();
        let (mut ctp, mut cfp, mut cfn) = (0, 0, 0);
        for (&sc, &lb) in s.iter().zip(&l) {
            match (sc >= 0.5, lb) {
                (true, true) => ctp += 1,
                (true, false) => cfp += 1,
                (false, true) => cfn += 1,
                _ => {}
            }
        }
        tp += ctp;
        fp += cfp;
        fneg += cfn;
        if l.iter().any(|&x| x) {
            aps.push(average_precision(&s, &l)?);
            f1s.push(f1(ctp, cfp, cfn));
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(MultiLabelMetrics {
        map: mean(&aps),
        cf1: mean(&f1s),
        of1: f1(tp, fp, fneg),
        skipped_classes: K - aps.len(),
    })
}

/// Token-level micro precision, recall and F1 over valid positions; the
/// positive class is "manipulated".
pub fn grounding_prf(pred: &[Vec<bool>], truth: &[Vec<bool>], valid: &[Vec<bool>]) -> Result<(f64, f64, f64)> {
    if pred.len() != truth.len() || pred.len() != valid.len() {
        return Err(MetricsError::LengthMismatch {
            what: "grounding_prf",
            left: pred.len(),
            right: truth.len(),
        });
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for ((p, t), v) in pred.iter().zip(truth).zip(valid) {
        if p.len() != t.len() || p.len() != v.len() {
            return Err(MetricsError::LengthMismatch {
                what: "grounding_prf row",
                left: p.len(),
                right: t.len(),
            });
        }
        for i in (0..p.len()).filter(|&i| v[i]) {
            match (p[i], t[i]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fneg > 0 {
        tp as f64 / (tp + fneg) as f64
    } else {
        0.0
    };
    Ok((p, r, f1(tp, fp, fneg)))
}

/// Evaluation summary. Serializes as a flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    pub eer: Option<f64>,
    pub acc: f64,
    pub map: Option<f64>,
    pub cf1: Option<f64>,
    pub of1: f64,
    pub g_precision: f64,
    pub g_recall: f64,
    pub g_f1: f64,
    pub n: usize,
    pub acc_threshold: f64,
    pub eer_threshold: Option<f64>,
    pub skipped_classes: usize,
}

/// Scores and labels of one evaluation pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub binary_scores: Vec<f64>,
    pub binary_labels: Vec<bool>,
    pub multi_scores: Vec<[f64; 4]>,
    pub multi_labels: Vec<[bool; 4]>,
    pub grounding_scores: Vec<Vec<f64>>,
    pub grounding_labels: Vec<Vec<bool>>,
    pub valid: Vec<Vec<bool>>,
}

pub const DECISION_THRESHOLD: f64 = 0.5;

impl EvalRecord {
    pub fn report(&self) -> Result<MetricsReport> {
        let n = self.binary_scores.len();
        let (auc_v, eer_v) = match check("auc", &self.binary_scores, &self.binary_labels) {
            Ok(_) => (
                Some(auc(&self.binary_scores, &self.binary_labels)?),
                Some(eer(&self.binary_scores, &self.binary_labels)?),
            ),
            Err(MetricsError::SingleClass(_)) => (None, None),
            Err(e) => return Err(e),
        };
        let ml = multilabel_metrics(&self.multi_scores, &self.multi_labels)?;
        let pred: Vec<Vec<bool>> = self
            .grounding_scores
            .iter()
            .map(|r| r.iter().map(|&s| s >= DECISION_THRESHOLD).collect())
            .collect();
        let (gp, gr, gf) = grounding_prf(&pred, &self.grounding_labels, &self.valid)?;
        Ok(MetricsReport {
            auc: auc_v,
            eer: eer_v.map(|e| e.rate),
            acc: accuracy(&self.binary_scores, &self.binary_labels, DECISION_THRESHOLD),
            map: ml.map,
            cf1: ml.cf1,
            of1: ml.of1,
            g_precision: gp,
            g_recall: gr,
            g_f1: gf,
            n,
            acc_threshold: DECISION_THRESHOLD,
            eer_threshold: eer_v.map(|e| e.threshold),
            skipped_classes: ml.skipped_classes,
        })
    }
}
