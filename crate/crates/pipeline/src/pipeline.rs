//! Detect, classify, generate the energy map once, crop it per box, fuse and
//! regress.

use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use foodlens_core::metrics::{match_detections, Prediction};
use foodlens_core::{crop_energy_map, crop_region, fuse_rgbd, BoundingBox, EnergyMap, FoodAnnotation};
use foodlens_models::classifier::ClassifierModel;
use foodlens_models::detector::DetectorModel;
use foodlens_models::gan::GeneratorModel;
use foodlens_models::regressor::{ChannelMask, RegressorModel};

use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};

fn staged<T, E: Into<PipelineError>>(stage: &'static str, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| PipelineError::at(stage)(e.into()))
}

/// The four trained stages plus any channel-masked regressors.
#[derive(Debug)]
pub struct Models {
    pub detector: DetectorModel,
    pub classifier: ClassifierModel,
    pub generator: GeneratorModel,
    pub regressor: RegressorModel,
    pub ablations: Vec<RegressorModel>,
}

impl Models {
    /// Loads every checkpoint named by `config`; ablation checkpoints are optional.
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let detector = staged("load-detector", DetectorModel::load(&config.checkpoint("detector")))?;
        let classifier = staged("load-classifier", ClassifierModel::load(&config.checkpoint("classifier")))?;
        let generator = staged("load-energy-gan", GeneratorModel::load(&config.checkpoint("energy_gan")))?;
        let regressor = staged(
            "load-regressor",
            RegressorModel::load(&config.regressor_checkpoint(ChannelMask::RgbDistribution)),
        )?;
        let mut ablations = Vec::new();
        for &mask in &config.regressor.ablations {
            let path = config.regressor_checkpoint(mask);
            if path.exists() {
                ablations.push(staged("load-regressor", RegressorModel::load(&path))?);
            }
        }
        Ok(Self {
            detector,
            classifier,
            generator,
            regressor,
            ablations,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccasionItem {
    pub bbox: BoundingBox,
    pub detection_score: f64,
    pub category: String,
    pub confidence: f64,
    pub kcal: f64,
    /// Annotated kcal of the groundtruth item this detection overlaps, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_kcal: Option<f64>,
    /// Estimates of the channel-masked regressors, keyed by mask name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ablation_kcal: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccasionResult {
    pub image_id: String,
    pub items: Vec<OccasionItem>,
    pub total_kcal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_total_kcal: Option<f64>,
}

impl OccasionResult {
    pub fn predictions(&self) -> Vec<Prediction> {
        self.items
            .iter()
            .map(|it| Prediction {
                detection: foodlens_core::Detection {
                    bbox: it.bbox,
                    score: it.detection_score,
                },
                category: it.category.clone(),
            })
            .collect()
    }
}

/// Portion estimates for every box from one shared full-image map.
pub fn estimate_portions(
    regressor: &RegressorModel,
    image: &RgbImage,
    map: &EnergyMap,
    boxes: &[BoundingBox],
    map_max: f64,
) -> Result<Vec<f64>> {
    let mut fused = Vec::with_capacity(boxes.len());
    for b in boxes {
        fused.push(fuse_rgbd(&crop_region(image, b)?, &crop_energy_map(map, b)?, map_max)?);
    }
    let refs: Vec<_> = fused.iter().collect();
    if refs.is_empty() {
        return Ok(Vec::new());
    }
    Ok(regressor.estimate_batch(&refs)?)
}

/// Runs all stages on one image. With `groundtruth`, each detection is
/// paired with the groundtruth item it overlaps best above `match_iou`.
pub fn run_end_to_end(
    models: &Models,
    image_id: &str,
    image: &RgbImage,
    groundtruth: Option<&[FoodAnnotation]>,
    match_iou: f64,
) -> Result<OccasionResult> {
    let detections = staged("detect", models.detector.detect(image))?;
    let boxes: Vec<BoundingBox> = detections.iter().map(|d| d.bbox).collect();

    let crops = staged(
        "classify",
        boxes.iter().map(|b| crop_region(image, b)).collect::<foodlens_core::Result<Vec<_>>>(),
    )?;
    let crop_refs: Vec<&RgbImage> = crops.iter().collect();
    let probs = staged("classify", models.classifier.probabilities(&crop_refs))?;

    let map = staged("generate-energy-map", models.generator.generate_energy_map(image))?;
    let map_max = models.generator.map_norm();
    let kcal = staged("regress", estimate_portions(&models.regressor, image, &map, &boxes, map_max))?;
    let mut ablation_kcal: Vec<(String, Vec<f64>)> = Vec::new();
    for reg in &models.ablations {
        let values = staged("regress", estimate_portions(reg, image, &map, &boxes, map_max))?;
        ablation_kcal.push((reg.hyper().channels.name().to_string(), values));
    }

    let label_set = models.classifier.label_set();
    let mut items: Vec<OccasionItem> = detections
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let (best, conf) = probs[i]
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
            OccasionItem {
                bbox: d.bbox,
                detection_score: d.score,
                category: label_set[best].clone(),
                confidence: conf,
                kcal: kcal[i],
                gt_kcal: None,
                ablation_kcal: ablation_kcal.iter().map(|(n, v)| (n.clone(), v[i])).collect(),
            }
        })
        .collect();

    let gt_total_kcal = match groundtruth {
        Some(gts) => {
            for (i, gt) in pair_with_groundtruth(&items, gts, match_iou)?.into_iter().enumerate() {
                items[i].gt_kcal = gt.map(|j| gts[j].kcal);
            }
            Some(gts.iter().map(|a| a.kcal).sum())
        }
        None => None,
    };
    Ok(OccasionResult {
        image_id: image_id.to_string(),
        total_kcal: items.iter().map(|it| it.kcal).sum(),
        items,
        gt_total_kcal,
    })
}

/// Class-agnostic one-to-one pairing of items with groundtruth indices.
pub fn pair_with_groundtruth(items: &[OccasionItem], gts: &[FoodAnnotation], iou: f64) -> Result<Vec<Option<usize>>> {
    const FOOD: &str = "food";
    let preds: Vec<Prediction> = items
        .iter()
        .map(|it| Prediction {
            detection: foodlens_core::Detection {
                bbox: it.bbox,
                score: it.detection_score,
            },
            category: FOOD.into(),
        })
        .collect();
    let gts: Vec<FoodAnnotation> = gts
        .iter()
        .map(|g| FoodAnnotation {
            category: FOOD.into(),
            ..g.clone()
        })
        .collect();
    let m = match_detections(&preds, &gts, iou)?;
    let mut out = vec![None; items.len()];
    if let Some(cm) = m.per_category.get(FOOD) {
        for e in &cm.entries {
            out[e.pred_index] = e.matched_gt;
        }
    }
    Ok(out)
}
