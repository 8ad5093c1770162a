//! Detection and portion-size evaluation.
//!
//! A prediction is a true positive when its category equals that of a still
//! unmatched groundtruth item and their IoU is strictly larger than the
//! threshold. Precision and recall are `TP / (TP + FP)` and `TP / (TP + FN)`,
//! both 0 on an empty denominator. AP integrates the precision envelope over
//! recall (all-point by default); mAP averages AP over the categories that
//! have groundtruth or predictions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::dataset::FoodAnnotation;
use crate::detection::{score_order, Detection};
use crate::error::{Error, Result};

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// A detection after classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub detection: Detection,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    /// Index into the prediction slice handed to [`match_detections`].
    pub pred_index: usize,
    pub score: f64,
    pub matched_gt: Option<usize>,
    pub is_tp: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMatch {
    /// Entries in processing (descending score) order.
    pub entries: Vec<MatchEntry>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub iou_threshold: f64,
    pub per_category: BTreeMap<String, CategoryMatch>,
}

impl MatchResult {
    /// `(TP, FP, FN)` summed over categories.
    pub fn totals(&self) -> (usize, usize, usize) {
        self.per_category
            .values()
            .fold((0, 0, 0), |(t, f, n), c| (t + c.tp, f + c.fp, n + c.fn_))
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("IoU threshold {t} outside (0, 1]")))
    }
}

/// Greedy category-aware matching in descending score order.
///
/// Among unmatched groundtruths of the same category with IoU above the
/// threshold, the one with the highest IoU wins; equal IoU goes to the lower
/// groundtruth index.
pub fn match_detections(preds: &[Prediction], gts: &[FoodAnnotation], iou_threshold: f64) -> Result<MatchResult> {
    check_threshold(iou_threshold)?;
    let mut per_category: BTreeMap<String, CategoryMatch> = BTreeMap::new();
    for g in gts {
        per_category.entry(g.category.clone()).or_default().n_gt += 1;
    }
    let mut taken = vec![false; gts.len()];
    for i in score_order(preds.iter().map(|p| p.detection.score)) {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.category != p.category {
                continue;
            }
            let v = iou(&p.detection.bbox, &g.bbox);
            if v > iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        let cat = per_category.entry(p.category.clone()).or_default();
        cat.entries.push(MatchEntry {
            pred_index: i,
            score: p.detection.score,
            matched_gt: best.map(|b| b.0),
            is_tp: best.is_some(),
        });
        if best.is_some() {
            cat.tp += 1;
        } else {
            cat.fp += 1;
        }
    }
    for c in per_category.values_mut() {
        c.fn_ = c.n_gt - c.tp;
    }
    Ok(MatchResult {
        iou_threshold,
        per_category,
    })
}

/// `(precision, recall)` over all categories.
pub fn precision_recall(result: &MatchResult) -> (f64, f64) {
    let (tp, fp, fn_) = result.totals();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the full precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at `n` evenly spaced recall levels in `[0, 1]`.
    Points(usize),
}

/// AP of a score-ranked list of TP/FP flags against `n_gt` groundtruths.
///
/// `None` means the category has neither groundtruth nor predictions and is
/// left out of mAP; predictions without groundtruth score 0.
pub fn average_precision(ranked: &[bool], n_gt: usize) -> Option<f64> {
    average_precision_with(ranked, n_gt, ApInterpolation::AllPoint)
}

pub fn average_precision_with(ranked: &[bool], n_gt: usize, interp: ApInterpolation) -> Option<f64> {
    if n_gt == 0 {
        return if ranked.is_empty() { None } else { Some(0.0) };
    }
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // Precision envelope: best precision at any recall at least this large.
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let ap = match interp {
        ApInterpolation::AllPoint => {
            let mut area = 0.0;
            let mut prev_recall = 0.0;
            for i in 0..recall.len() {
                if recall[i] > prev_recall {
                    area += (recall[i] - prev_recall) * envelope[i];
                    prev_recall = recall[i];
                }
            }
            area
        }
        ApInterpolation::Points(n) => {
            let n = n.max(2);
            let mut sum = 0.0;
            for s in 0..n {
                let r = s as f64 / (n - 1) as f64;
                sum += recall
                    .iter()
                    .position(|&rc| rc >= r)
                    .map_or(0.0, |i| envelope[i]);
            }
            sum / n as f64
        }
    };
    Some(ap)
}

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Predictions and groundtruth of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub image_id: String,
    pub predictions: Vec<Prediction>,
    pub groundtruth: Vec<FoodAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMap {
    pub threshold: f64,
    pub map: f64,
    pub per_category: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub per_threshold: Vec<ThresholdMap>,
    /// Mean of the per-threshold mAP values.
    pub mean: f64,
}

impl MapSummary {
    pub fn at(&self, threshold: f64) -> Option<&ThresholdMap> {
        self.per_threshold.iter().find(|t| (t.threshold - threshold).abs() < 1e-12)
    }
}

/// Per-category AP at one threshold, pooling ranked predictions across images.
pub fn category_aps(images: &[ImageEval], threshold: f64, interp: ApInterpolation) -> Result<BTreeMap<String, Option<f64>>> {
    let mut ranked: BTreeMap<String, Vec<(f64, bool)>> = BTreeMap::new();
    let mut n_gt: BTreeMap<String, usize> = BTreeMap::new();
    for img in images {
        let m = match_detections(&img.predictions, &img.groundtruth, threshold)?;
        for (cat, cm) in m.per_category {
            *n_gt.entry(cat.clone()).or_default() += cm.n_gt;
            ranked
                .entry(cat)
                .or_default()
                .extend(cm.entries.iter().map(|e| (e.score, e.is_tp)));
        }
    }
    let cats: BTreeSet<String> = ranked.keys().chain(n_gt.keys()).cloned().collect();
    let mut out = BTreeMap::new();
    for cat in cats {
        let mut list = ranked.remove(&cat).unwrap_or_default();
        // Stable: equal scores keep image order, then within-image order.
        list.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = list.iter().map(|x| x.1).collect();
        out.insert(cat.clone(), average_precision_with(&flags, n_gt.get(&cat).copied().unwrap_or(0), interp));
    }
    Ok(out)
}

/// mAP at each threshold plus their mean.
pub fn mean_average_precision(images: &[ImageEval], thresholds: &[f64], interp: ApInterpolation) -> Result<MapSummary> {
    if images.iter().all(|i| i.groundtruth.is_empty()) {
        return Err(Error::InvalidArgument("no categories with groundtruth in the evaluated set".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("no IoU thresholds given".into()));
    }
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let per_category = category_aps(images, t, interp)?;
        let aps: Vec<f64> = per_category.values().flatten().copied().collect();
        let map = aps.iter().sum::<f64>() / aps.len() as f64;
        per_threshold.push(ThresholdMap {
            threshold: t,
            map,
            per_category,
        });
    }
    let mean = per_threshold.iter().map(|t| t.map).sum::<f64>() / per_threshold.len() as f64;
    Ok(MapSummary { per_threshold, mean })
}

/// Class-agnostic AP: every prediction and groundtruth collapses to one class.
pub fn class_agnostic_ap(images: &[ImageEval], threshold: f64) -> Result<f64> {
    const FOOD: &str = "food";
    let collapsed: Vec<ImageEval> = images
        .iter()
        .map(|img| ImageEval {
            image_id: img.image_id.clone(),
            predictions: img
                .predictions
                .iter()
                .map(|p| Prediction { detection: p.detection, category: FOOD.into() })
                .collect(),
            groundtruth: img
                .groundtruth
                .iter()
                .map(|g| FoodAnnotation { category: FOOD.into(), ..g.clone() })
                .collect(),
        })
        .collect();
    let aps = category_aps(&collapsed, threshold, ApInterpolation::AllPoint)?;
    Ok(aps.get(FOOD).copied().flatten().unwrap_or(0.0))
}

fn check_pairs(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} groundtruths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("empty prediction list".into()));
    }
    Ok(())
}

/// Mean absolute error in kcal.
pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let total: f64 = preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).sum();
    Ok(total / preds.len() as f64)
}

/// Total absolute error as a percentage of total groundtruth energy.
pub fn error_percentage(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let gt_total: f64 = gts.iter().sum();
    if gt_total <= 0.0 {
        return Err(Error::InvalidArgument("groundtruth total is zero".into()));
    }
    let err: f64 = preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).sum();
    Ok(100.0 * err / gt_total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccasionTotal {
    pub image_id: String,
    pub pred_total: f64,
    pub gt_total: f64,
}

/// Sums per-item `(image_id, predicted, groundtruth)` kcal into occasion
/// totals, in order of first appearance.
pub fn occasion_totals(per_item: &[(String, f64, f64)]) -> Vec<OccasionTotal> {
    let mut out: Vec<OccasionTotal> = Vec::new();
    for (id, p, g) in per_item {
        match out.iter_mut().find(|o| &o.image_id == id) {
            Some(o) => {
                o.pred_total += p;
                o.gt_total += g;
            }
            None => out.push(OccasionTotal {
                image_id: id.clone(),
                pred_total: *p,
                gt_total: *g,
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    fn pred(b: BoundingBox, s: f64, c: &str) -> Prediction {
        Prediction { detection: Detection::new(b, s).unwrap(), category: c.into() }
    }

    fn gt(b: BoundingBox, c: &str) -> FoodAnnotation {
        FoodAnnotation { bbox: b, category: c.into(), kcal: 1.0 }
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bb(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        // Touching edges do not overlap.
        assert_eq!(iou(&a, &bb(2.0, 0.0, 3.0, 2.0)), 0.0);
    }

    #[test]
    fn match_simple_cases() {
        let b = bb(0.0, 0.0, 10.0, 10.0);
        let m = match_detections(&[pred(b, 0.9, "a")], &[gt(b, "a")], 0.5).unwrap();
        assert_eq!(m.totals(), (1, 0, 0));
        let m = match_detections(&[pred(b, 0.9, "a")], &[gt(b, "b")], 0.5).unwrap();
        assert_eq!(m.totals(), (0, 1, 1));
        assert!(match_detections(&[], &[], 0.0).is_err());
    }

    #[test]
    fn match_is_strict_at_threshold() {
        // IoU exactly 0.5 is not "larger than" 0.5.
        let g = bb(0.0, 0.0, 10.0, 10.0);
        let p = bb(0.0, 0.0, 10.0, 5.0);
        assert_eq!(iou(&g, &p), 0.5);
        let m = match_detections(&[pred(p, 0.9, "a")], &[gt(g, "a")], 0.5).unwrap();
        assert_eq!(m.totals(), (0, 1, 1));
    }

    #[test]
    fn higher_score_claims_first() {
        let g = bb(0.0, 0.0, 10.0, 10.0);
        let preds = [pred(bb(0.0, 0.0, 10.0, 9.0), 0.4, "a"), pred(bb(0.0, 0.0, 10.0, 8.0), 0.8, "a")];
        let m = match_detections(&preds, &[gt(g, "a")], 0.5).unwrap();
        let c = &m.per_category["a"];
        assert_eq!(c.entries[0].pred_index, 1);
        assert!(c.entries[0].is_tp);
        assert!(!c.entries[1].is_tp);
    }

    #[test]
    fn precision_recall_examples() {
        let mut per_category = BTreeMap::new();
        per_category.insert("a".to_string(), CategoryMatch { tp: 3, fp: 1, fn_: 2, n_gt: 5, entries: vec![] });
        let m = MatchResult { iou_threshold: 0.5, per_category };
        assert_eq!(precision_recall(&m), (0.75, 0.6));
        let m = match_detections(&[], &[gt(bb(0.0, 0.0, 1.0, 1.0), "a")], 0.5).unwrap();
        assert_eq!(precision_recall(&m), (0.0, 0.0));
        let b = bb(0.0, 0.0, 4.0, 4.0);
        let m = match_detections(&[pred(b, 0.5, "a")], &[gt(b, "a")], 0.5).unwrap();
        assert_eq!(precision_recall(&m), (1.0, 1.0));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false, true], 1), Some(0.5));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[false], 0), Some(0.0));
        assert_eq!(average_precision(&[], 3), Some(0.0));
        // Envelope lifts the dip: [T, F, T] with 2 gts -> 0.5*1 + 0.5*(2/3).
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn ap_eleven_point() {
        let ap = average_precision_with(&[true], 1, ApInterpolation::Points(11)).unwrap();
        assert_eq!(ap, 1.0);
        let ap = average_precision_with(&[false, true], 1, ApInterpolation::Points(11)).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn thresholds_are_exact() {
        let t = coco_thresholds();
        assert_eq!(t, vec![0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]);
    }

    #[test]
    fn map_mean_of_categories() {
        // Category a: AP 1.0; category b: one FP ranked above its TP -> AP 0.5.
        let img = ImageEval {
            image_id: "x".into(),
            predictions: vec![
                pred(bb(0.0, 0.0, 4.0, 4.0), 0.9, "a"),
                pred(bb(20.0, 20.0, 24.0, 24.0), 0.8, "b"),
                pred(bb(10.0, 10.0, 14.0, 14.0), 0.7, "b"),
            ],
            groundtruth: vec![gt(bb(0.0, 0.0, 4.0, 4.0), "a"), gt(bb(10.0, 10.0, 14.0, 14.0), "b")],
        };
        let s = mean_average_precision(&[img], &[0.5], ApInterpolation::AllPoint).unwrap();
        assert_eq!(s.per_threshold[0].map, 0.75);
        assert_eq!(s.mean, 0.75);
        assert!(mean_average_precision(&[], &[0.5], ApInterpolation::AllPoint).is_err());
    }

    #[test]
    fn mae_and_ep_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[110.0, 190.0], &[100.0, 200.0]).unwrap(), 10.0);
        assert!((mae(&[100.0], &[205.64]).unwrap() - 105.64).abs() < 1e-12);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
        assert_eq!(error_percentage(&[3.0], &[3.0]).unwrap(), 0.0);
        assert_eq!(error_percentage(&[50.0], &[100.0]).unwrap(), 50.0);
        assert_eq!(error_percentage(&[150.0, 50.0], &[100.0, 100.0]).unwrap(), 50.0);
        assert!(error_percentage(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn occasion_sums() {
        let items = vec![("a".to_string(), 100.0, 90.0), ("a".to_string(), 50.0, 60.0)];
        let t = occasion_totals(&items);
        assert_eq!(t, vec![OccasionTotal { image_id: "a".into(), pred_total: 150.0, gt_total: 150.0 }]);
        assert!(occasion_totals(&[]).is_empty());
        let t = occasion_totals(&[("z".to_string(), 3.0, 4.0)]);
        assert_eq!((t[0].pred_total, t[0].gt_total), (3.0, 4.0));
    }
}
