//! Confusion-matrix mean IoU.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::IGNORE_LABEL;

/// `N × N` pixel counts, rows ground truth, columns prediction. Pixels whose
/// ground truth is the ignore label are not counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MIoUAccumulator {
    n: usize,
    confusion: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouResult {
    pub miou: f64,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
}

impl MIoUAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self { n: num_classes, confusion: vec![0; num_classes * num_classes] }
    }

    pub fn from_confusion(num_classes: usize, confusion: Vec<u64>) -> Result<Self> {
        if confusion.len() != num_classes * num_classes {
            return Err(Error::mismatch("confusion entries", num_classes * num_classes, confusion.len()));
        }
        Ok(Self { n: num_classes, confusion })
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.confusion[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().sum()
    }

    pub fn add(&mut self, gt: &[u16], pred: &[u16]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::mismatch("prediction length", gt.len(), pred.len()));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.n || p >= self.n {
                return Err(Error::InvalidArgument(format!("label pair ({g}, {p}) out of range for {} classes", self.n)));
            }
            self.confusion[g * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.n != self.n {
            return Err(Error::mismatch("class count", self.n, other.n));
        }
        self.confusion.iter_mut().zip(&other.confusion).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// `IoU_c = TP / (TP + FP + FN)`, averaged over classes with a non-empty
/// union.
pub fn compute_miou(acc: &MIoUAccumulator) -> Result<MiouResult> {
    let n = acc.n;
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = acc.count(c, c);
            let row: u64 = (0..n).map(|p| acc.count(c, p)).sum();
            let col: u64 = (0..n).map(|g| acc.count(g, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::EmptyMiou);
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouResult { miou, per_class })
}
