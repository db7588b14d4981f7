//! Confusion matrices and the per-class IoU / accuracy scores built on them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `counts[truth][pred]` over `classes × classes` pixel pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(invalid("confusion", "need at least one class"));
        }
        Ok(Self {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel pair.
    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(invalid(
                "confusion",
                format!("label pair ({truth}, {pred}) out of range for {} classes", self.classes),
            ));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    /// Elementwise sum; both matrices must have the same class count.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch {
                op: "confusion_merge",
                lhs: vec![self.classes],
                rhs: vec![other.classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.count(c, c)
    }

    /// Pixels predicted `c` whose truth differs.
    pub fn fp(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&t| t != c).map(|t| self.count(t, c)).sum()
    }

    /// Pixels of truth `c` predicted otherwise.
    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&p| p != c).map(|p| self.count(c, p)).sum()
    }

    pub fn tn(&self, c: usize) -> u64 {
        self.total() - self.tp(c) - self.fp(c) - self.fn_(c)
    }

    /// `TP / (TP + FP + FN)`; a class absent from both rasters scores 1.
    pub fn iou(&self, c: usize) -> f64 {
        let union = self.tp(c) + self.fp(c) + self.fn_(c);
        if union == 0 {
            1.0
        } else {
            self.tp(c) as f64 / union as f64
        }
    }

    /// Binary accuracy of class `c` against the rest: `(TP + TN) / total`.
    pub fn acc(&self, c: usize) -> f64 {
        (self.tp(c) + self.tn(c)) as f64 / self.total() as f64
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(invalid("metrics", "confusion matrix is empty"));
        }
        Ok(())
    }

    pub fn miou(&self) -> Result<f64> {
        self.check_nonempty()?;
        Ok((0..self.classes).map(|c| self.iou(c)).sum::<f64>() / self.classes as f64)
    }

    pub fn macc(&self) -> Result<f64> {
        self.check_nonempty()?;
        Ok((0..self.classes).map(|c| self.acc(c)).sum::<f64>() / self.classes as f64)
    }

    pub fn report(&self) -> Result<MetricsReport> {
        self.check_nonempty()?;
        let per_class = (0..self.classes)
            .map(|c| ClassMetrics {
                class: c,
                tp: self.tp(c),
                fp: self.fp(c),
                fn_: self.fn_(c),
                tn: self.tn(c),
                iou: self.iou(c),
                acc: self.acc(c),
            })
            .collect();
        Ok(MetricsReport {
            classes: self.classes,
            pixels: self.total(),
            miou: self.miou()?,
            macc: self.macc()?,
            per_class,
        })
    }
}

/// Tallies `counts[truth][pred]` over two label rasters of equal length.
pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    let mut cm = ConfusionMatrix::new(classes)?;
    for (&p, &t) in pred.iter().zip(truth) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

/// Reads a label raster stored as a tensor of non-negative integers.
pub fn labels_from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = v.as_f64();
            if f >= 0.0 && f.fract() == 0.0 && f < usize::MAX as f64 {
                Ok(f as usize)
            } else {
                Err(invalid("labels", format!("element {i} = {f} is not a class index")))
            }
        })
        .collect()
}

/// Confusion of two label tensors of identical shape.
pub fn confusion_tensors<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, classes: usize) -> Result<ConfusionMatrix> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    confusion(&labels_from_tensor(pred)?, &labels_from_tensor(truth)?, classes)
}

/// One CSV row per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: usize,
    pub pixels: u64,
    pub miou: f64,
    pub macc: f64,
    pub per_class: Vec<ClassMetrics>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let l = [0, 1, 2, 2, 1];
        let cm = confusion(&l, &l, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.count(t, p) > 0, t == p);
            }
        }
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.macc().unwrap(), 1.0);
    }

    #[test]
    fn single_pixel() {
        let cm = confusion(&[1], &[0], 2).unwrap();
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn worked_scores() {
        // class 0: TP 2, FP 1, FN 1
        let cm = confusion(&[0, 0, 0, 1, 1], &[0, 0, 1, 0, 1], 2).unwrap();
        assert_eq!((cm.tp(0), cm.fp(0), cm.fn_(0)), (2, 1, 1));
        assert_eq!(cm.iou(0), 0.5);
        // class 0: TP 1, TN 2, FP 1, FN 0
        let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!((cm.tp(0), cm.tn(0), cm.fp(0), cm.fn_(0)), (1, 2, 1, 0));
        assert_eq!(cm.acc(0), 0.75);
    }

    #[test]
    fn absent_class_scores_one() {
        let cm = confusion(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(cm.iou(2), 1.0);
        assert_eq!(cm.acc(2), 1.0);
    }

    #[test]
    fn errors() {
        assert!(confusion(&[0, 3], &[0, 1], 3).is_err());
        assert!(confusion(&[0], &[0, 1], 3).is_err());
        assert!(ConfusionMatrix::new(3).unwrap().miou().is_err());
        assert!(labels_from_tensor(&Tensor::<f64>::from_rows(&[&[0.5]]).unwrap()).is_err());
        let a = Tensor::<f64>::zeros(&[2, 2]);
        assert!(confusion_tensors(&a, &Tensor::zeros(&[4]), 2).is_err());
    }

    proptest! {
        #[test]
        fn scores_bounded_and_merge_additive(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200),
            split in 0usize..200,
        ) {
            let (pred, truth): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let cm = confusion(&pred, &truth, 4).unwrap();
            prop_assert_eq!(cm.total(), pairs.len() as u64);
            for c in 0..4 {
                prop_assert!((0.0..=1.0).contains(&cm.iou(c)));
                prop_assert!((0.0..=1.0).contains(&cm.acc(c)));
                prop_assert_eq!(cm.tp(c) + cm.fp(c) + cm.fn_(c) + cm.tn(c), cm.total());
            }
            let k = split.min(pairs.len());
            let mut left = confusion(&pred[..k], &truth[..k], 4).unwrap();
            left.merge(&confusion(&pred[k..], &truth[k..], 4).unwrap()).unwrap();
            prop_assert_eq!(left, cm);
        }

        #[test]
        fn relabeling_permutes_counts(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..100),
            perm_id in 0usize..6,
        ) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let s = perms[perm_id];
            let (pred, truth): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let cm = confusion(&pred, &truth, 3).unwrap();
            let pp: Vec<_> = pred.iter().map(|&l| s[l]).collect();
            let tt: Vec<_> = truth.iter().map(|&l| s[l]).collect();
            let cm2 = confusion(&pp, &tt, 3).unwrap();
            for t in 0..3 {
                for p in 0..3 {
                    prop_assert_eq!(cm2.count(s[t], s[p]), cm.count(t, p));
                }
            }
        }
    }
}
