//! Evaluation report from end-to-end results and groundtruth.

use std::collections::{BTreeMap, BTreeSet};

use foodlens_core::metrics::{
    coco_thresholds, error_percentage, mae, mean_average_precision, ApInterpolation, ImageEval, OccasionTotal,
};
use foodlens_core::report::{CategoryAp, PortionMethodReport, ThresholdEntry};
use foodlens_core::{EvalReport, FoodAnnotation};
use foodlens_models::regressor::ChannelMask;

use crate::error::{PipelineError, Result};
use crate::pipeline::OccasionResult;

/// Portion accuracy of one method: item MAE over detections paired with a
/// groundtruth item, and EP over occasion totals.
fn method_report(name: &str, results: &[OccasionResult], kcal: impl Fn(&crate::pipeline::OccasionItem) -> f64) -> PortionMethodReport {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut pairs = Vec::new();
    for r in results {
        for it in &r.items {
            if let Some(g) = it.gt_kcal {
                preds.push(kcal(it));
                gts.push(g);
            }
        }
        if let Some(gt_total) = r.gt_total_kcal {
            pairs.push(OccasionTotal {
                image_id: r.image_id.clone(),
                pred_total: r.items.iter().map(&kcal).sum(),
                gt_total,
            });
        }
    }
    let pred_totals: Vec<f64> = pairs.iter().map(|p| p.pred_total).collect();
    let gt_totals: Vec<f64> = pairs.iter().map(|p| p.gt_total).collect();
    PortionMethodReport {
        name: name.to_string(),
        mae: mae(&preds, &gts).unwrap_or(f64::NAN),
        ep: error_percentage(&pred_totals, &gt_totals).unwrap_or(f64::NAN),
        matched_items: preds.len(),
        occasion_pairs: pairs,
    }
}

/// Builds the report for `results` against `groundtruth` (keyed by image id).
pub fn build_eval_report(
    config_hash: &str,
    results: &[OccasionResult],
    groundtruth: &BTreeMap<String, Vec<FoodAnnotation>>,
    iou_thresholds: &[f64],
) -> Result<EvalReport> {
    let images: Vec<ImageEval> = results
        .iter()
        .map(|r| {
            let gt = groundtruth.get(&r.image_id).ok_or_else(|| {
                PipelineError::Config(format!("no groundtruth for evaluated image {}", r.image_id))
            })?;
            Ok(ImageEval {
                image_id: r.image_id.clone(),
                predictions: r.predictions(),
                groundtruth: gt.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let interp = ApInterpolation::AllPoint;
    let sweep = mean_average_precision(&images, iou_thresholds, interp)?;
    let coco = mean_average_precision(&images, &coco_thresholds(), interp)?;
    let at = |t: f64| coco.at(t).expect("coco thresholds include 0.5 and 0.75");

    let mut per_category_ap = BTreeMap::new();
    let cats: BTreeSet<&String> = at(0.5).per_category.keys().collect();
    for cat in cats {
        per_category_ap.insert(
            cat.clone(),
            CategoryAp {
                ap_50: at(0.5).per_category.get(cat).copied().flatten(),
                ap_75: at(0.75).per_category.get(cat).copied().flatten(),
            },
        );
    }

    let main = method_report(ChannelMask::RgbDistribution.name(), results, |it| it.kcal);
    let mut methods = vec![main.clone()];
    let ablations: BTreeSet<&String> = results.iter().flat_map(|r| r.items.iter()).flat_map(|it| it.ablation_kcal.keys()).collect();
    for name in ablations {
        methods.push(method_report(name, results, |it| it.ablation_kcal.get(name).copied().unwrap_or(0.0)));
    }

    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        map_50: at(0.5).map,
        map_75: at(0.75).map,
        map_50_95: coco.mean,
        thresholds: sweep
            .per_threshold
            .iter()
            .map(|t| ThresholdEntry {
                threshold: t.threshold,
                map: t.map,
            })
            .collect(),
        per_category_ap,
        mae: main.mae,
        ep: main.ep,
        occasion_pairs: main.occasion_pairs,
        methods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::OccasionItem;
    use foodlens_core::BoundingBox;

    fn item(b: [f64; 4], cat: &str, kcal: f64, gt: Option<f64>) -> OccasionItem {
        OccasionItem {
            bbox: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            detection_score: 0.9,
            category: cat.into(),
            confidence: 0.8,
            kcal,
            gt_kcal: gt,
            ablation_kcal: BTreeMap::from([("rgb_only".to_string(), kcal + 10.0)]),
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = vec![FoodAnnotation {
            bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            category: "rice".into(),
            kcal: 100.0,
        }];
        let results = vec![OccasionResult {
            image_id: "a".into(),
            items: vec![item([0.0, 0.0, 10.0, 10.0], "rice", 90.0, Some(100.0))],
            total_kcal: 90.0,
            gt_total_kcal: Some(100.0),
        }];
        let gts = BTreeMap::from([("a".to_string(), gt)]);
        let r = build_eval_report("h", &results, &gts, &coco_thresholds()).unwrap();
        assert_eq!(r.map_50, 1.0);
        assert_eq!(r.map_50_95, 1.0);
        assert_eq!(r.thresholds.len(), 10);
        assert_eq!(r.mae, 10.0);
        assert!((r.ep - 10.0).abs() < 1e-12);
        assert_eq!(r.methods.len(), 2);
        assert_eq!(r.methods[1].name, "rgb_only");
        assert_eq!(r.methods[1].mae, 0.0);
    }

    #[test]
    fn missing_groundtruth_is_an_error() {
        let results = vec![OccasionResult {
            image_id: "zz".into(),
            items: vec![],
            total_kcal: 0.0,
            gt_total_kcal: None,
        }];
        assert!(build_eval_report("h", &results, &BTreeMap::new(), &[0.5]).is_err());
    }
}
