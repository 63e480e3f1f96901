//! Road-segmentation evaluation: per-sample road IoU averaged over the set
//! (mIoU), plus precision and recall, with total-function conventions for
//! empty masks.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::tensor::ArrayDyn;

/// Default probability threshold for turning road probabilities into a mask.
pub const ROAD_THRESHOLD: f64 = 0.5;

/// `probs > thresh` per pixel.
pub fn threshold_probs(probs: &ArrayDyn, thresh: f64) -> ArrayD<bool> {
    probs.mapv(|p| p > thresh)
}

/// Pixel counts underlying every metric: (true positives, false positives,
/// false negatives).
pub fn confusion_counts(pred: &ArrayD<bool>, gt: &ArrayD<bool>) -> Result<(u64, u64, u64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "confusion_counts",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fn_))
}

/// Road-class intersection over union; 1 when both masks are empty.
pub fn road_iou(pred: &ArrayD<bool>, gt: &ArrayD<bool>) -> Result<f64> {
    let (tp, fp, fn_) = confusion_counts(pred, gt)?;
    let union = tp + fp + fn_;
    Ok(if union == 0 { 1.0 } else { tp as f64 / union as f64 })
}

/// `(precision, recall)`; precision is 1 with no predicted positives,
/// recall is 1 with no ground-truth positives.
pub fn precision_recall(pred: &ArrayD<bool>, gt: &ArrayD<bool>) -> Result<(f64, f64)> {
    let (tp, fp, fn_) = confusion_counts(pred, gt)?;
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    Ok((precision, recall))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl SampleMetrics {
    pub fn compute(id: &str, pred: &ArrayD<bool>, gt: &ArrayD<bool>) -> Result<Self> {
        let iou = road_iou(pred, gt)?;
        let (precision, recall) = precision_recall(pred, gt)?;
        Ok(Self { id: id.to_string(), iou, precision, recall })
    }
}

/// Aggregate report: unweighted means of the per-sample metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub per_sample: Vec<SampleMetrics>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::contract("eval_report", "no samples to aggregate"));
        }
        let n = per_sample.len() as f64;
        let miou = per_sample.iter().map(|s| s.iou).sum::<f64>() / n;
        let precision = per_sample.iter().map(|s| s.precision).sum::<f64>() / n;
        let recall = per_sample.iter().map(|s| s.recall).sum::<f64>() / n;
        Ok(Self { miou, precision, recall, n_samples: per_sample.len(), per_sample })
    }

    /// One row per sample plus an aggregate footer, tab-separated.
    pub fn render(&self) -> String {
        let mut out = String::from("id\tiou\tprecision\trecall\n");
        for s in &self.per_sample {
            out.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\n", s.id, s.iou, s.precision, s.recall));
        }
        out.push_str(&format!(
            "aggregate(n={})\t{:.6}\t{:.6}\t{:.6}\n",
            self.n_samples, self.miou, self.precision, self.recall
        ));
        out
    }
}
