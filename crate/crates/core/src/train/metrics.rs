use super::data::Sample;
use super::loss::IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::network::{network_forward, Network};
use crate::tensor::Tensor4;
use serde::Serialize;

/// `counts[truth * k + predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
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

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    /// Adds pixel pairs; ground-truth pixels equal to the ignore index are skipped.
    pub fn add(&mut self, predicted: &[u8], truth: &[u8]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::Data("prediction and label lengths differ".into()));
        }
        let k = self.classes;
        for (&p, &t) in predicted.iter().zip(truth) {
            if t == IGNORE_INDEX {
                continue;
            }
            if p as usize >= k || t as usize >= k {
                return Err(Error::Data(format!("class index outside 0..{k}")));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// IoU of each class; `None` for classes absent from the ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let truth: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                if truth == 0 {
                    return None;
                }
                let predicted: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
                let tp = self.get(c, c);
                Some(tp as f64 / (truth + predicted - tp) as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in the ground truth.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        Self {
            per_class_iou: confusion.iou(),
            mean_iou: confusion.mean_iou(),
            pixel_accuracy: confusion.pixel_accuracy(),
            confusion,
        }
    }
}

/// Per-pixel argmax over channels of `(n, k, h, w)` logits, in `(n, h, w)`
/// order. Ties go to the lower class.
pub fn argmax_labels(logits: &Tensor4) -> Vec<u8> {
    let s = logits.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..s.c {
                let v = logits.data()[(n * s.c + c) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Label map predicted for one sample in inference mode.
pub fn predict(net: &Network, sample: &Sample) -> Result<Vec<u8>> {
    let logits = network_forward(net, &sample.image_tensor(), false)?;
    Ok(argmax_labels(&logits))
}

/// Confusion-matrix IoU of the network's inference-mode predictions.
pub fn evaluate_miou(net: &Network, samples: &[Sample]) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(net.spec().num_classes);
    for s in samples {
        cm.add(&predict(net, s)?, &s.mask)?;
    }
    Ok(EvalReport::from_confusion(cm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        let t = [0, 1, 2, 2, 1, 0];
        cm.add(&t, &t).unwrap();
        assert_eq!(cm.mean_iou(), 1.0);
        assert_eq!(cm.pixel_accuracy(), 1.0);
    }

    #[test]
    fn constant_background_on_balanced_pair() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap();
        let iou = cm.iou();
        assert_eq!(iou[0], Some(0.5));
        assert_eq!(iou[1], Some(0.0));
    }

    #[test]
    fn hand_computed_three_class() {
        // 4x4 instance, rows of truth / prediction
        let truth = [0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2, 2, 2, 0, 1];
        let pred = [0, 1, 1, 1, 0, 0, 2, 1, 2, 2, 0, 2, 2, 1, 0, 1];
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&pred, &truth).unwrap();
        // truth 0: 5 pixels, predicted 0,1,0,0,0 -> tp 4, fn 1
        // truth 1: 5 pixels, predicted 1,1,2,1,1 -> tp 4, fn 1
        // truth 2: 6 pixels, predicted 2,2,0,2,2,1 -> tp 4, fn 2
        let expect = [4, 1, 0, 0, 4, 1, 1, 1, 4];
        assert_eq!(cm.counts, expect);
        let iou = cm.iou();
        // class 0: tp 4, fp 1, fn 1 -> 4/6 ; class 1: tp 4, fp 2, fn 1 -> 4/7 ; class 2: tp 4, fp 1, fn 2 -> 4/7
        assert_eq!(iou, vec![Some(4.0 / 6.0), Some(4.0 / 7.0), Some(4.0 / 7.0)]);
        assert_eq!(cm.pixel_accuracy(), 12.0 / 16.0);
    }

    #[test]
    fn absent_class_excluded_from_mean() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(cm.iou()[2], None);
        assert_eq!(cm.mean_iou(), 1.0);
    }

    #[test]
    fn ignore_index_skipped() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[1, 0], &[IGNORE_INDEX, 0]).unwrap();
        assert_eq!(cm.total(), 1);
    }
}
