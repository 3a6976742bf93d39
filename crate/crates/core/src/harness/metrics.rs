//! Pixel-wise cross-entropy and mean intersection-over-union.

use crate::error::{DflatError, Result};
use crate::tensor::Tensor;

/// Mean over pixels of `-log softmax(logits)[label]`, computed with a
/// max-shifted log-sum-exp. `logits` is any tensor whose last axis is the
/// class axis.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = *logits.dims().last().unwrap_or(&0);
    if c == 0 || logits.len() / c != labels.len() || labels.is_empty() {
        return Err(DflatError::shape("cross_entropy", logits.dims(), &[labels.len(), c]));
    }
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        if y >= c {
            return Err(DflatError::config(format!("label {y} out of range for {c} classes")));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Class confusion counts, `counts[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(DflatError::shape("miou", &[pred.len()], &[truth.len()]));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= self.classes || t >= self.classes {
                return Err(DflatError::config(format!(
                    "label {} out of range for {} classes",
                    p.max(t),
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    /// IoU per class; `None` when the class occurs in neither prediction
    /// nor truth.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        let n = self.classes;
        (0..n)
            .map(|k| {
                let tp = self.counts[k * n + k];
                let truth: u64 = self.counts[k * n..(k + 1) * n].iter().sum();
                let pred: u64 = (0..n).map(|t| self.counts[t * n + k]).sum();
                let union = truth + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Mean IoU of one prediction against one ground truth, plus the per-class
/// values it averages.
pub fn miou(pred: &[usize], truth: &[usize], classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let mut conf = Confusion::new(classes);
    conf.add(pred, truth)?;
    Ok((conf.mean_iou(), conf.per_class()))
}
