//! Segmentation and classification metrics.

use serde::Serialize;

use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per position.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Data(format!(
                "prediction has {} positions, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.classes;
        if let Some(&v) = pred.iter().chain(gt).find(|&&v| usize::from(v) >= k) {
            return Err(Error::Data(format!("class {v} outside [0, {k})")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[usize::from(g) * k + usize::from(p)] += 1;
        }
        Ok(())
    }

    /// Element-wise sum; merging is associative and order-independent.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Data(format!(
                "merging {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fp, fn)` of class `c`.
    pub fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    pub class: usize,
    /// Percent; `None` when the class is absent from both truth and
    /// prediction.
    pub iou: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegScores {
    pub miou: f64,
    pub mf1: f64,
    pub per_class: Vec<ClassScore>,
}

/// Macro IoU and F1 in percent. Classes absent from both ground truth and
/// prediction are left out of the means.
pub fn miou_mf1(cm: &ConfusionMatrix) -> SegScores {
    let per_class: Vec<ClassScore> = (0..cm.classes)
        .map(|c| {
            let (tp, fp, fnn) = cm.tp_fp_fn(c);
            let present = tp + fp + fnn > 0;
            ClassScore {
                class: c,
                iou: present.then(|| 100.0 * tp as f64 / (tp + fp + fnn) as f64),
                f1: present.then(|| 100.0 * 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64),
            }
        })
        .collect();
    let mean = |f: fn(&ClassScore) -> Option<f64>| {
        let v: Vec<f64> = per_class.iter().filter_map(f).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    SegScores {
        miou: mean(|c| c.iou),
        mf1: mean(|c| c.f1),
        per_class,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DietScores {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 (percent) over `classes` diet labels.
pub fn diet_metrics(preds: &[usize], gts: &[usize], classes: usize) -> Result<DietScores> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} diet predictions for {} labels",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Ok(DietScores {
            accuracy: 0.0,
            macro_f1: 0.0,
        });
    }
    let mut cm = ConfusionMatrix::new(classes);
    let narrow = |v: &[usize]| -> Result<Vec<u8>> {
        v.iter()
            .map(|&x| u8::try_from(x).map_err(|_| Error::Data(format!("diet class {x} too large"))))
            .collect()
    };
    cm.accumulate(&narrow(preds)?, &narrow(gts)?)?;
    let correct = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(DietScores {
        accuracy: 100.0 * correct as f64 / preds.len() as f64,
        macro_f1: miou_mf1(&cm).mf1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_binary_grid() {
        // TP = 4, FP = 2, FN = 2, TN = 8
        let gt = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let pred = [1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0];
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        let s = miou_mf1(&cm);
        assert_eq!(s.per_class[1].iou, Some(50.0));
        assert!((s.per_class[1].f1.unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!((s.per_class[0].iou.unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!((s.miou - 175.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn complement_scores_zero() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 0, 1, 0], &[0, 1, 0, 1]).unwrap();
        assert_eq!(miou_mf1(&cm).miou, 0.0);
    }

    #[test]
    fn absent_class_excluded() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0; 9], &[0; 9]).unwrap();
        let s = miou_mf1(&cm);
        assert_eq!(s.per_class[1].iou, None);
        assert_eq!((s.miou, s.mf1), (100.0, 100.0));
    }

    #[test]
    fn out_of_range_class_is_data_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(cm.accumulate(&[2], &[0]), Err(Error::Data(_))));
        cm.accumulate(&[], &[]).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn six_sample_diet_case() {
        // class 0: tp 2 fp 1 fn 0; class 1: tp 1 fp 0 fn 1; class 2: tp 1 fp 1 fn 1
        let gts = [0, 0, 1, 1, 2, 2];
        let preds = [0, 0, 1, 2, 2, 0];
        let s = diet_metrics(&preds, &gts, 3).unwrap();
        assert!((s.accuracy - 400.0 / 6.0).abs() < 1e-12);
        let f1 = (4.0 / 5.0 + 2.0 / 3.0 + 2.0 / 4.0) / 3.0 * 100.0;
        assert!((s.macro_f1 - f1).abs() < 1e-9);
    }
}
