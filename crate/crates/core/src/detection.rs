use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::metrics::iou;

/// A scored, class-agnostic food region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Self { bbox, score })
    }
}

/// Indices of `dets` in descending score order; equal scores keep input order.
pub fn score_order(scores: impl IntoIterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.into_iter().collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy non-maximum suppression.
///
/// Walks detections by descending score and drops any whose IoU with an
/// already kept detection exceeds `iou_threshold`. Survivors come back in
/// descending score order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(detections.iter().map(|d| (&d.bbox, d.score)), iou_threshold)
        .into_iter()
        .map(|i| detections[i])
        .collect()
}

/// Index form of [`nms`] for callers holding boxes and scores separately.
pub fn nms_indices<'a>(items: impl IntoIterator<Item = (&'a BoundingBox, f64)>, iou_threshold: f64) -> Vec<usize> {
    let items: Vec<(&BoundingBox, f64)> = items.into_iter().collect();
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(items.iter().map(|x| x.1)) {
        if keep.iter().all(|&k| iou(items[k].0, items[i].0) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}
