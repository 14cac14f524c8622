//! Confusion matrices, mIoU and pixel accuracy.

use std::ops::AddAssign;

use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `counts[c][p]` is the number of pixels labelled `c` and predicted `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.classes + pred]
    }

    /// Adds paired predictions and labels; ignore-labelled pixels are skipped.
    pub fn add(&mut self, pred: &[i32], label: &[i32]) -> Result<()> {
        if pred.len() != label.len() {
            return Err(Error::shape("confusion matrix", &[pred.len()], &[label.len()]));
        }
        let l = self.classes as i32;
        for (&p, &c) in pred.iter().zip(label) {
            if c == IGNORE_INDEX {
                continue;
            }
            if !(0..l).contains(&c) || !(0..l).contains(&p) {
                return Err(Error::Contract(format!("class pair ({c}, {p}) outside 0..{l}")));
            }
            self.counts[c as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both
    /// labels and predictions.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let row: u64 = (0..self.classes).map(|p| self.get(class, p)).sum();
        let col: u64 = (0..self.classes).map(|c| self.get(c, class)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU over the classes present in labels or predictions.
    pub fn mean_iou(&self) -> Result<f64> {
        let ious: Vec<f64> = (0..self.classes).filter_map(|c| self.iou(c)).collect();
        if ious.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::EmptyEvaluation),
            n => Ok(self.trace() as f64 / n as f64),
        }
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "confusion matrices of different class counts");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

pub fn confusion_matrix(pred: &Tensor<i32>, label: &Tensor<i32>, classes: usize) -> Result<ConfusionMatrix> {
    if pred.shape() != label.shape() {
        return Err(Error::shape("confusion matrix", pred.shape(), label.shape()));
    }
    let mut m = ConfusionMatrix::new(classes);
    m.add(pred.data(), label.data())?;
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiouMode {
    /// Class-mean IoU of the aggregated matrix.
    ClassMean,
    /// Per-sample class-mean IoU, averaged over samples.
    SampleMean,
}

/// mIoU over per-sample matrices. Samples without any valid pixel do not
/// contribute to the sample mean.
pub fn miou(per_sample: &[ConfusionMatrix], mode: MiouMode) -> Result<f64> {
    let first = per_sample.first().ok_or(Error::EmptyEvaluation)?;
    match mode {
        MiouMode::ClassMean => aggregate(per_sample, first.classes()).mean_iou(),
        MiouMode::SampleMean => {
            let values: Vec<f64> = per_sample.iter().filter_map(|m| m.mean_iou().ok()).collect();
            if values.is_empty() {
                return Err(Error::EmptyEvaluation);
            }
            Ok(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

pub fn aggregate(per_sample: &[ConfusionMatrix], classes: usize) -> ConfusionMatrix {
    let mut total = ConfusionMatrix::new(classes);
    for m in per_sample {
        total += m;
    }
    total
}

pub fn pixel_accuracy(conf: &ConfusionMatrix) -> Result<f64> {
    conf.pixel_accuracy()
}

/// Per-pixel argmax over the class axis of `[B, L, H, W]` logits; the lowest
/// class index wins exact ties.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Result<Tensor<i32>> {
    let [b, l, h, w] = logits.dims4()?;
    let plane = h * w;
    let data = logits.data();
    Ok(Tensor::from_fn(vec![b, h, w], |k| {
        let (bi, p) = (k / plane, k % plane);
        let base = bi * l * plane + p;
        let mut best = 0;
        for c in 1..l {
            if data[base + c * plane] > data[base + best * plane] {
                best = c;
            }
        }
        best as i32
    }))
}
