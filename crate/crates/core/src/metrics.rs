//! Classification metrics, ROC analysis and cutoff selection.

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(dim_err!("{} predictions for {} labels", pred.len(), truth.len()));
        }
        if pred.is_empty() {
            return Err(Error::Data("no predictions to score".into()));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> ClassMetrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            accuracy: ratio(self.tp + self.tn, self.total()),
        }
    }

    pub fn tnr(&self) -> Result<f64> {
        if self.tn + self.fp == 0 {
            return Err(Error::Data("TNR is undefined without negatives".into()));
        }
        Ok(self.tn as f64 / (self.tn + self.fp) as f64)
    }
}

/// Ratios with an empty denominator reported as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn precision_recall_f1_acc(pred: &[bool], truth: &[bool]) -> Result<ClassMetrics> {
    Ok(Confusion::from_labels(pred, truth)?.metrics())
}

pub fn tnr(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Confusion::from_labels(pred, truth)?.tnr()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive; the first point uses `+inf`.
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// Ordered by decreasing threshold, so both rates are nondecreasing.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Sweeps every distinct score as a threshold; AUC by the trapezoidal rule.
pub fn roc_and_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(dim_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("ROC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().expect("start point");
        let p = RocPoint {
            threshold: t,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// Youden-optimal cutoff (`TPR - FPR`, ties toward the lower threshold). The value
/// returned is the midpoint between the winning score and the next lower distinct
/// score, so it separates the same training samples as the vertex does; the lowest
/// score is returned unchanged.
pub fn choose_cutoff(roc: &RocCurve) -> f64 {
    let finite: Vec<&RocPoint> = roc.points.iter().filter(|p| p.threshold.is_finite()).collect();
    let mut best = 0;
    for (i, p) in finite.iter().enumerate() {
        if p.tpr - p.fpr >= finite[best].tpr - finite[best].fpr {
            best = i;
        }
    }
    match finite.get(best + 1) {
        Some(lower) => (finite[best].threshold + lower.threshold) / 2.0,
        None => finite[best].threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion() {
        let mut pred = vec![true; 10];
        pred.extend([false; 10]);
        let mut truth = vec![true; 8];
        truth.extend([false; 2]);
        truth.extend([true; 2]);
        truth.extend([false; 8]);
        let m = precision_recall_f1_acc(&pred, &truth).unwrap();
        for v in [m.precision, m.recall, m.f1, m.accuracy] {
            assert!((v - 0.8).abs() < 1e-12);
        }
        assert!(precision_recall_f1_acc(&[], &[]).is_err());
    }

    #[test]
    fn tnr_cases() {
        assert_eq!(tnr(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(tnr(&[false, false, false, true], &[false; 4]).unwrap(), 0.75);
        assert!(tnr(&[true], &[true]).is_err());
    }

    #[test]
    fn separated_and_tied_roc() {
        let r = roc_and_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(choose_cutoff(&r), 0.5);
        let r = roc_and_auc(&[0.3; 4], &[true, false, true, false]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.points.len(), 2);
        assert_eq!(choose_cutoff(&r), 0.3);
        assert!(roc_and_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn youden_picks_best_vertex() {
        // Vertices (fpr, tpr): 0.8 -> (0, .5), 0.6 -> (.5, .5), 0.4 -> (.5, 1), 0.2 -> (1, 1).
        let r = roc_and_auc(&[0.8, 0.6, 0.4, 0.2], &[true, false, true, false]).unwrap();
        let j: Vec<f64> = r.points.iter().map(|p| p.tpr - p.fpr).collect();
        assert_eq!(j, vec![0.0, 0.5, 0.0, 0.5, 0.0]);
        // Tie between 0.8 and 0.4 resolves to the lower threshold.
        assert!((choose_cutoff(&r) - 0.3).abs() < 1e-12);
    }
}
