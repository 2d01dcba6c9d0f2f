//! Segmentation quality metrics.
//!
//! Masks are flat `u8` slices holding 0 or 1; probabilities are flat `f64`
//! slices in `[0, 1]`.

mod report;
mod stats;

pub use report::{Aggregate, MetricAccumulator, MetricReport, PerImage, AGGREGATE_FILE, PER_IMAGE_FILE};
pub use stats::{
    ln_gamma, mean_variance, one_sided_t_test, regularized_incomplete_beta, student_t_cdf, time_inference,
    TTestResult,
};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `1` iff `p > threshold`.
pub fn binarize(probabilities: &[f64], threshold: f64) -> Vec<u8> {
    probabilities.iter().map(|&p| u8::from(p > threshold)).collect()
}

pub fn check_binary(mask: &[u8], what: &str) -> Result<()> {
    match mask.iter().position(|&v| v > 1) {
        Some(i) => Err(Error::Contract(format!(
            "{what} is not binary: value {} at index {i}",
            mask[i]
        ))),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &[u8], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        check_binary(pred, "prediction")?;
        check_binary(gt, "ground truth")?;
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> PixelMetrics {
        let both_empty = self.tp + self.fp + self.fn_ == 0;
        let ratio = |num: u64, den: u64| {
            if den > 0 {
                num as f64 / den as f64
            } else if both_empty {
                1.0
            } else {
                0.0
            }
        };
        PixelMetrics {
            iou: ratio(self.tp, self.tp + self.fp + self.fn_),
            dice: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
            precision: ratio(self.tp, self.tp + self.fp),
            sensitivity: ratio(self.tp, self.tp + self.fn_),
            pixel_accuracy: ratio(self.tp + self.tn, self.total()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub pixel_accuracy: f64,
}

pub fn pixel_metrics(pred: &[u8], gt: &[u8]) -> Result<PixelMetrics> {
    Ok(Confusion::from_masks(pred, gt)?.metrics())
}

/// Areas under the ROC and precision-recall curves. Both are `None` when
/// the ground truth lacks one of the classes the curve needs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveMetrics {
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
}

/// Sweeps every distinct probability as a threshold. ROC area is
/// trapezoidal; PR area sums recall steps times the precision envelope
/// (the best precision at any recall at least as large).
pub fn curve_metrics(probabilities: &[f64], gt: &[u8]) -> Result<CurveMetrics> {
    if probabilities.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} ground-truth pixels",
            probabilities.len(),
            gt.len()
        )));
    }
    check_binary(gt, "ground truth")?;
    if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Contract(format!("probability {p} outside [0, 1]")));
    }
    let pos = gt.iter().filter(|&&g| g == 1).count() as f64;
    let neg = gt.len() as f64 - pos;

    let mut order: Vec<usize> = (0..gt.len()).collect();
    order.sort_unstable_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]));

    // (tp, fp) after admitting every pixel with probability >= each distinct value.
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let v = probabilities[order[i]];
        while i < order.len() && probabilities[order[i]] == v {
            if gt[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((tp, fp));
    }

    let roc_auc = (pos > 0.0 && neg > 0.0).then(|| {
        let (mut area, mut prev_tpr, mut prev_fpr) = (0.0, 0.0, 0.0);
        for &(tp, fp) in &points {
            let (tpr, fpr) = (tp / pos, fp / neg);
            area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
            prev_tpr = tpr;
            prev_fpr = fpr;
        }
        area
    });

    let pr_auc = (pos > 0.0).then(|| {
        let recall: Vec<f64> = points.iter().map(|&(tp, _)| tp / pos).collect();
        let mut precision: Vec<f64> = points.iter().map(|&(tp, fp)| tp / (tp + fp)).collect();
        for k in (0..precision.len().saturating_sub(1)).rev() {
            precision[k] = precision[k].max(precision[k + 1]);
        }
        let mut area = 0.0;
        let mut prev_r = 0.0;
        for (r, p) in recall.iter().zip(&precision) {
            area += (r - prev_r) * p;
            prev_r = *r;
        }
        area
    });
    Ok(CurveMetrics { roc_auc, pr_auc })
}

/// 8-connected components of the foreground, each as sorted pixel indices.
pub fn connected_components(mask: &[u8], height: usize, width: usize) -> Result<Vec<Vec<usize>>> {
    if mask.len() != height * width {
        return Err(Error::Shape(format!(
            "mask of {} pixels is not {height}x{width}",
            mask.len()
        )));
    }
    check_binary(mask, "mask")?;
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] == 1 && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    Ok(out)
}

/// Detected and total ground-truth components.
pub fn object_counts(pred: &[u8], gt: &[u8], height: usize, width: usize, overlap_threshold: f64) -> Result<(usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape("prediction and ground truth differ in size".into()));
    }
    check_binary(pred, "prediction")?;
    let comps = connected_components(gt, height, width)?;
    let detected = comps
        .iter()
        .filter(|c| {
            let hit = c.iter().filter(|&&i| pred[i] == 1).count();
            hit as f64 / c.len() as f64 > overlap_threshold
        })
        .count();
    Ok((detected, comps.len()))
}

/// Fraction of ground-truth components whose covered share exceeds
/// `overlap_threshold`; 1 when there are no components.
pub fn object_recall(pred: &[u8], gt: &[u8], height: usize, width: usize, overlap_threshold: f64) -> Result<f64> {
    let (detected, total) = object_counts(pred, gt, height, width, overlap_threshold)?;
    Ok(if total == 0 { 1.0 } else { detected as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_is_strict() {
        assert_eq!(binarize(&[0.5, 0.51, 0.0, 1.0], 0.5), vec![0, 1, 0, 1]);
        assert_eq!(binarize(&[0.0, 1e-9], 0.0), vec![0, 1]);
    }

    #[test]
    fn all_ones_against_left_half() {
        let gt: Vec<u8> = (0..16).map(|i| u8::from(i % 4 < 2)).collect();
        let m = pixel_metrics(&[1; 16], &gt).unwrap();
        assert_eq!((m.iou, m.precision, m.sensitivity), (0.5, 0.5, 1.0));
    }

    #[test]
    fn empty_masks_score_one() {
        let m = pixel_metrics(&[0; 9], &[0; 9]).unwrap();
        assert_eq!(m.iou, 1.0);
        assert_eq!(m.dice, 1.0);
        assert_eq!(m.precision, 1.0);
        let m = pixel_metrics(&[0; 4], &[0, 1, 0, 0]).unwrap();
        assert_eq!((m.precision, m.sensitivity, m.iou), (0.0, 0.0, 0.0));
    }

    #[test]
    fn non_binary_masks_are_rejected() {
        assert!(matches!(pixel_metrics(&[2, 0], &[1, 0]), Err(Error::Contract(_))));
    }

    #[test]
    fn curve_extremes() {
        let gt = [1, 1, 0, 0];
        let c = curve_metrics(&[0.9, 0.8, 0.2, 0.1], &gt).unwrap();
        assert_eq!((c.roc_auc, c.pr_auc), (Some(1.0), Some(1.0)));
        let c = curve_metrics(&[0.3; 4], &gt).unwrap();
        assert_eq!(c.roc_auc, Some(0.5));
        let c = curve_metrics(&[0.3, 0.4], &[0, 0]).unwrap();
        assert_eq!(c.roc_auc, None);
    }

    #[test]
    fn two_lines_one_detected() {
        let (h, w) = (5, 12);
        let mut gt = vec![0u8; h * w];
        let mut pred = vec![0u8; h * w];
        for x in 0..10 {
            gt[w + x] = 1;
            gt[3 * w + x] = 1;
        }
        for x in 0..6 {
            pred[w + x] = 1;
        }
        for x in 0..4 {
            pred[3 * w + x] = 1;
        }
        assert_eq!(object_recall(&pred, &gt, h, w, 0.5).unwrap(), 0.5);
        assert_eq!(object_recall(&gt, &gt, h, w, 0.5).unwrap(), 1.0);
        assert_eq!(object_recall(&vec![0; h * w], &gt, h, w, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_pixels_join_one_component() {
        let mask = [1, 0, 0, 0, 1, 0, 0, 0, 1];
        assert_eq!(connected_components(&mask, 3, 3).unwrap().len(), 1);
    }
}
