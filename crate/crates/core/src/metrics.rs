//! Per-level evaluation: confusion matrices, mIoU, mAcc.
//!
//! Conventions: classes with zero union (absent from truth and prediction)
//! drop out of the mIoU mean; classes absent from the truth drop out of the
//! mAcc mean. Matrices merge, so shards can accumulate independently and
//! combine afterwards.

use serde::Serialize;
use thiserror::Error;

use crate::hierarchy::LabelRaster;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction raster is {ph}x{pw}, truth is {th}x{tw}")]
    SizeMismatch { ph: usize, pw: usize, th: usize, tw: usize },
    #[error("{kind} value {value} at ({x},{y}) outside 0..{classes}")]
    BadIndex { kind: &'static str, value: u32, x: usize, y: usize, classes: usize },
    #[error("confusion matrix is empty; no pixels were accumulated")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Square count matrix indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix { classes, counts: vec![0; classes * classes], ignored: 0 }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one (truth, prediction) raster pair. Truth pixels holding the
    /// truth raster's ignore value are skipped and counted as ignored.
    pub fn accumulate(&mut self, pred: &LabelRaster, truth: &LabelRaster) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(MetricsError::SizeMismatch {
                ph: pred.height,
                pw: pred.width,
                th: truth.height,
                tw: truth.width,
            });
        }
        for y in 0..truth.height {
            for x in 0..truth.width {
                let t = truth.get(y, x);
                if t == truth.ignore {
                    self.ignored += 1;
                    continue;
                }
                let p = pred.get(y, x);
                if t as usize >= self.classes {
                    return Err(MetricsError::BadIndex {
                        kind: "truth",
                        value: t,
                        x,
                        y,
                        classes: self.classes,
                    });
                }
                if p as usize >= self.classes {
                    return Err(MetricsError::BadIndex {
                        kind: "prediction",
                        value: p,
                        x,
                        y,
                        classes: self.classes,
                    });
                }
                self.counts[t as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Combine with another shard's counts.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging mismatched matrices");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
    }

    /// Per-class intersection-over-union; `None` for zero-union classes.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..self.classes).filter(|&t| t != c).map(|t| self.count(t, c)).sum();
                let fn_: u64 =
                    (0..self.classes).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with nonzero union.
    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(MetricsError::Empty);
        }
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    /// Mean per-class accuracy over classes present in the truth.
    pub fn macc(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(MetricsError::Empty);
        }
        let mut accs = Vec::new();
        for c in 0..self.classes {
            let truth_count: u64 = (0..self.classes).map(|p| self.count(c, p)).sum();
            if truth_count > 0 {
                accs.push(self.count(c, c) as f64 / truth_count as f64);
            }
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn raster(h: usize, w: usize, values: &[u32]) -> LabelRaster {
        LabelRaster::from_data(h, w, values.to_vec())
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let truth = raster(2, 2, &[0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&truth, &truth).unwrap();
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.count(0, 1), 0);
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.macc().unwrap(), 1.0);
    }

    #[test]
    fn ignored_pixels_change_nothing() {
        let ig = crate::hierarchy::DEFAULT_IGNORE;
        let truth = raster(1, 3, &[ig, ig, ig]);
        let pred = raster(1, 3, &[0, 1, 2]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.ignored(), 3);
        assert!(matches!(cm.miou(), Err(MetricsError::Empty)));
    }

    #[test]
    fn hand_counted_two_class_case() {
        // truth all class 0 (4 px), pred: half class 0, half class 1:
        // counts [[2,2],[0,0]] -> IoU0 = 2/4, IoU1 = 0/2 -> mIoU = 0.25;
        // class 1 absent from truth -> mAcc = 2/4 over class 0 only = 0.5.
        let truth = raster(1, 4, &[0, 0, 0, 0]);
        let pred = raster(1, 4, &[0, 0, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.count(0, 0), 2);
        assert_eq!(cm.count(0, 1), 2);
        assert_eq!(cm.miou().unwrap(), 0.25);
        assert_eq!(cm.macc().unwrap(), 0.5);
    }

    #[test]
    fn absent_classes_drop_from_the_miou_mean() {
        // Class 2 never appears in truth or prediction: zero union, excluded.
        let truth = raster(1, 2, &[0, 1]);
        let pred = raster(1, 2, &[0, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.per_class_iou()[2], None);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn accumulate_matches_double_loop_count() {
        let mut r = rng::stream(3, "metrics");
        let t: Vec<u32> = (0..64).map(|_| r.gen_range(0..5)).collect();
        let p: Vec<u32> = (0..64).map(|_| r.gen_range(0..5)).collect();
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&raster(8, 8, &p), &raster(8, 8, &t)).unwrap();
        for truth_c in 0..5u32 {
            for pred_c in 0..5u32 {
                let want =
                    t.iter().zip(&p).filter(|&(&tv, &pv)| tv == truth_c && pv == pred_c).count();
                assert_eq!(cm.count(truth_c as usize, pred_c as usize), want as u64);
            }
        }
    }

    #[test]
    fn sharded_accumulation_equals_concatenation() {
        let mut r = rng::stream(5, "metrics-shard");
        let t: Vec<u32> = (0..32).map(|_| r.gen_range(0..4)).collect();
        let p: Vec<u32> = (0..32).map(|_| r.gen_range(0..4)).collect();

        let mut whole = ConfusionMatrix::new(4);
        whole.accumulate(&raster(4, 8, &p), &raster(4, 8, &t)).unwrap();

        let mut a = ConfusionMatrix::new(4);
        a.accumulate(&raster(2, 8, &p[..16]), &raster(2, 8, &t[..16])).unwrap();
        let mut b = ConfusionMatrix::new(4);
        b.accumulate(&raster(2, 8, &p[16..]), &raster(2, 8, &t[16..])).unwrap();
        a.merge(&b);
        assert_eq!(a, whole);
        assert_eq!(a.miou().unwrap(), whole.miou().unwrap());
    }

    #[test]
    fn metrics_stay_in_unit_range() {
        let mut r = rng::stream(7, "metrics-range");
        for trial in 0..20 {
            let n = 4 + trial % 3;
            let t: Vec<u32> = (0..100).map(|_| r.gen_range(0..n as u32)).collect();
            let p: Vec<u32> = (0..100).map(|_| r.gen_range(0..n as u32)).collect();
            let mut cm = ConfusionMatrix::new(n);
            cm.accumulate(&raster(10, 10, &p), &raster(10, 10, &t)).unwrap();
            let miou = cm.miou().unwrap();
            let macc = cm.macc().unwrap();
            assert!((0.0..=1.0).contains(&miou));
            assert!((0.0..=1.0).contains(&macc));
        }
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let truth = raster(1, 1, &[9]);
        let pred = raster(1, 1, &[0]);
        let mut cm = ConfusionMatrix::new(3);
        assert!(matches!(
            cm.accumulate(&pred, &truth),
            Err(MetricsError::BadIndex { kind: "truth", .. })
        ));
    }
}
