//! Confusion-matrix bookkeeping, IoU and pixel accuracy.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE_INDEX};

/// `C×C` pixel counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair; ground-truth pixels labelled
    /// [`IGNORE_INDEX`] are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape(format!(
                "prediction {}×{} vs ground truth {}×{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let c = self.num_classes;
        if let Some(&class) = pred.data().iter().find(|&&p| p as usize >= c) {
            return Err(Error::ClassOutOfRange { class, num_classes: c });
        }
        gt.validate(c)?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != IGNORE_INDEX {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU (`None` for classes absent from both prediction and
    /// ground truth) and their unweighted mean.
    pub fn miou(&self) -> Result<IouSummary> {
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let diag = self.count(k, k);
                let row: u64 = (0..c).map(|j| self.count(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.count(i, k)).sum();
                let union = row + col - diag;
                (union > 0).then(|| diag as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::NoEvaluatedClasses);
        }
        let mean_iou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(IouSummary { per_class, mean_iou })
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let diag: u64 = (0..self.num_classes).map(|k| self.count(k, k)).sum();
        (total > 0).then(|| diag as f64 / total as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouSummary {
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let s = cm.miou()?;
        Ok(Self {
            per_class: s.per_class,
            mean_iou: s.mean_iou,
            pixel_accuracy: cm.pixel_accuracy().unwrap_or(0.0),
        })
    }

    /// Per-class table followed by `mIoU <value> pixel_acc <value>`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("class\tiou\n");
        for (k, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{k}\t{v:.6}"),
                None => writeln!(out, "{k}\tn/a"),
            }
            .expect("writing to a String");
        }
        writeln!(out, "mIoU {:.6} pixel_acc {:.6}", self.mean_iou, self.pixel_accuracy).expect("writing to a String");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_tally() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(2, 2, &[0, 0, 1, 1]), &map(2, 2, &[0, 1, 1, 1])).unwrap();
        assert_eq!([cm.count(0, 0), cm.count(0, 1), cm.count(1, 0), cm.count(1, 1)], [1, 0, 1, 2]);
        let s = cm.miou().unwrap();
        assert_eq!(s.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((s.mean_iou - 0.583333).abs() < 1e-6);
    }

    #[test]
    fn perfect_and_ignored() {
        let gt = map(2, 3, &[0, 1, 2, 2, 1, 0]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.count(i, j) > 0, i == j);
            }
        }
        assert_eq!(cm.miou().unwrap().mean_iou, 1.0);

        let before = cm.clone();
        cm.accumulate(&gt, &LabelMap::filled(2, 3, IGNORE_INDEX)).unwrap();
        assert_eq!(cm, before);
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&map(1, 2, &[0, 1]), &map(1, 2, &[0, 1])).unwrap();
        let s = cm.miou().unwrap();
        assert_eq!(s.per_class[2], None);
        assert_eq!(s.mean_iou, 1.0);
    }

    #[test]
    fn errors() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(cm.miou(), Err(Error::NoEvaluatedClasses)));
        assert!(cm.accumulate(&map(1, 1, &[2]), &map(1, 1, &[0])).is_err());
        assert!(cm.accumulate(&map(1, 1, &[0]), &map(1, 1, &[5])).is_err());
        assert!(cm.accumulate(&map(1, 2, &[0, 0]), &map(2, 1, &[0, 0])).is_err());
    }

    #[test]
    fn report_text() {
        let r = EvalReport { per_class: vec![Some(0.5), None], mean_iou: 0.5, pixel_accuracy: 0.75 };
        assert_eq!(r.to_text(), "class\tiou\n0\t0.500000\n1\tn/a\nmIoU 0.500000 pixel_acc 0.750000\n");
    }
}
