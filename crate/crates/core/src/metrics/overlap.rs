//! Overlap-based measures: mean best overlap, box IoU, CorLoc and detection rate.

use ndarray::Array2;

use crate::masks::{BoundingBox, LabelMap};

/// Default IoU a predicted box needs to localize a ground-truth box.
pub const LOCALIZATION_THRESHOLD: f64 = 0.5;

pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean over ground-truth masks of the best IoU reached by any predicted
/// mask. A prediction may serve several ground-truth masks.
pub fn mean_best_overlap(pred_masks: &[Array2<bool>], gt_masks: &[Array2<bool>]) -> Option<f64> {
    if gt_masks.is_empty() {
        return None;
    }
    let total: f64 = gt_masks
        .iter()
        .map(|g| {
            pred_masks
                .iter()
                .map(|p| mask_iou(p, g))
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / gt_masks.len() as f64)
}

/// One binary mask per distinct label of `labels`, optionally skipping 0.
pub fn masks_per_label(labels: &LabelMap, skip_background: bool) -> Vec<Array2<bool>> {
    labels
        .distinct()
        .into_iter()
        .filter(|&l| !(skip_background && l == 0))
        .map(|l| labels.binary_mask(l))
        .collect()
}

pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.xmax.min(b.xmax).saturating_sub(a.xmin.max(b.xmin));
    let h = a.ymax.min(b.ymax).saturating_sub(a.ymin.max(b.ymin));
    let inter = (w * h) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    inter / union
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizationScores {
    pub corloc: f64,
    pub detection_rate: f64,
    /// Images that had at least one ground-truth box.
    pub images: usize,
}

/// CorLoc (share of images with at least one localized object) and
/// detection rate (mean share of localized objects per image). Images
/// without ground-truth boxes are skipped.
pub fn corloc_and_detection_rate(
    predictions: &[Vec<BoundingBox>],
    ground_truth: &[Vec<BoundingBox>],
    threshold: f64,
) -> Option<LocalizationScores> {
    let (mut hits, mut rate, mut images) = (0usize, 0.0, 0usize);
    for (pred, gt) in predictions.iter().zip(ground_truth) {
        if gt.is_empty() {
            continue;
        }
        let found = gt
            .iter()
            .filter(|g| pred.iter().any(|p| box_iou(p, g) >= threshold))
            .count();
        images += 1;
        hits += usize::from(found > 0);
        rate += found as f64 / gt.len() as f64;
    }
    (images > 0).then(|| LocalizationScores {
        corloc: hits as f64 / images as f64,
        detection_rate: rate / images as f64,
        images,
    })
}
