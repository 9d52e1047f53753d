//! Confusion-matrix accumulation and mIoU.

use serde::{Deserialize, Serialize};

use crate::data::{SegmentationMask, IGNORE_LABEL};
use crate::error::{Error, Result};

/// K×K pixel counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    /// Total evaluated (non-ignored) pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one prediction/ground-truth pair. Ignored GT pixels are
    /// skipped; out-of-range labels are an input error.
    pub fn accumulate(&mut self, pred: &SegmentationMask, gt: &SegmentationMask) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::shape(format!(
                "confusion: pred {}×{} vs gt {}×{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= self.k || p as usize >= self.k {
                return Err(Error::Input(format!(
                    "confusion: label pair (gt={g}, pred={p}) out of range for K={}",
                    self.k
                )));
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    /// Merge another matrix into this one (deterministic reduction).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(Error::shape(format!(
                "confusion merge: K={} vs K={}",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` where the class has zero union.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.count(c, c);
                let row: u64 = (0..self.k).map(|j| self.count(c, j)).sum();
                let col: u64 = (0..self.k).map(|g| self.count(g, c)).sum();
                let union = row + col - tp;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes with nonzero union; 0 if no class qualifies.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            log::warn!("miou: every class has zero union, reporting 0");
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    pub fn pixel_acc(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.k).map(|c| self.count(c, c)).sum();
        correct as f64 / total as f64
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            miou: self.miou(),
            per_class_iou: self.per_class_iou(),
            pixel_acc: self.pixel_acc(),
        }
    }
}

/// Metrics summary as emitted in JSON reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_acc: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, labels: &[u8]) -> SegmentationMask {
        SegmentationMask::from_labels(h, w, labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal_and_miou_one() {
        let gt = mask(2, 2, &[0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.count(0, 1), 0);
        assert_eq!(cm.miou(), 1.0);
        assert_eq!(cm.pixel_acc(), 1.0);
    }

    #[test]
    fn ignored_pixels_change_nothing() {
        let gt = mask(1, 4, &[255, 255, 255, 255]);
        let pred = mask(1, 4, &[0, 1, 0, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.miou(), 0.0);
    }

    #[test]
    fn worked_example_seven_twelfths() {
        // GT=[0,0,1,1], pred=[0,1,1,1] → IoU₀=1/2, IoU₁=2/3, mIoU=7/12
        let gt = mask(1, 4, &[0, 0, 1, 1]);
        let pred = mask(1, 4, &[0, 1, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.miou(), (1.0 / 2.0 + 2.0 / 3.0) / 2.0);
        assert!((cm.miou() - 7.0 / 12.0).abs() <= 1e-12);
    }

    #[test]
    fn disjoint_two_class_prediction_is_zero() {
        let gt = mask(1, 2, &[0, 1]);
        let pred = mask(1, 2, &[1, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.miou(), 0.0);
    }

    #[test]
    fn hand_counted_two_by_two() {
        let gt = mask(2, 2, &[0, 1, 1, 255]);
        let pred = mask(2, 2, &[0, 0, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(1, 0), 1);
        assert_eq!(cm.count(1, 1), 1);
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn zero_union_classes_are_excluded() {
        // class 2 never appears in gt or pred
        let gt = mask(1, 2, &[0, 1]);
        let pred = mask(1, 2, &[0, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.per_class_iou()[2], None);
        assert_eq!(cm.miou(), 1.0);
    }

    #[test]
    fn accumulation_equals_concatenation() {
        let gt1 = mask(1, 3, &[0, 1, 2]);
        let p1 = mask(1, 3, &[0, 2, 2]);
        let gt2 = mask(1, 3, &[2, 2, 0]);
        let p2 = mask(1, 3, &[2, 1, 0]);
        let mut acc = ConfusionMatrix::new(3);
        acc.accumulate(&p1, &gt1).unwrap();
        acc.accumulate(&p2, &gt2).unwrap();

        let gt_cat = mask(1, 6, &[0, 1, 2, 2, 2, 0]);
        let p_cat = mask(1, 6, &[0, 2, 2, 2, 1, 0]);
        let mut cat = ConfusionMatrix::new(3);
        cat.accumulate(&p_cat, &gt_cat).unwrap();
        assert_eq!(acc, cat);
    }

    #[test]
    fn relabeling_invariance() {
        let gt = mask(2, 2, &[0, 1, 2, 1]);
        let pred = mask(2, 2, &[0, 2, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt).unwrap();
        // permutation 0→2, 1→0, 2→1 applied to both
        let perm = |m: &SegmentationMask| {
            let relabeled: Vec<u8> = m.labels().iter().map(|&l| [2u8, 0, 1][l as usize]).collect();
            mask(2, 2, &relabeled)
        };
        let mut cm2 = ConfusionMatrix::new(3);
        cm2.accumulate(&perm(&pred), &perm(&gt)).unwrap();
        assert!((cm.miou() - cm2.miou()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let gt = mask(1, 2, &[0, 1]);
        let pred = mask(2, 1, &[0, 1]);
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&pred, &gt).is_err());
    }
}
