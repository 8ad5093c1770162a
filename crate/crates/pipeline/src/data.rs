//! Training sets for the crop-level stages, assembled from a manifest.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use foodlens_core::{crop_energy_map, crop_region, fuse_rgbd, BoundingBox, DatasetManifest, EatingOccasionRecord, EnergyMap};
use foodlens_models::classifier::LabeledCrop;
use foodlens_models::gan::GeneratorModel;
use foodlens_models::regressor::PortionSample;

use crate::config::{CropConfig, MapSource};
use crate::error::{PipelineError, Result};

/// Moves each edge of `bbox` by up to `frac` of the box side, clipped to the image.
pub fn jitter_box(bbox: &BoundingBox, frac: f64, width: u32, height: u32, rng: &mut ChaCha8Rng) -> Option<BoundingBox> {
    let (w, h) = (bbox.width(), bbox.height());
    let mut shift = |v: f64, side: f64| v + rng.random_range(-frac..=frac) * side;
    let (x1, y1, x2, y2) = (shift(bbox.x1(), w), shift(bbox.y1(), h), shift(bbox.x2(), w), shift(bbox.y2(), h));
    BoundingBox::new(x1, y1, x2, y2).ok()?.clip(width, height).filter(|b| b.width() >= 2.0 && b.height() >= 2.0)
}

/// The groundtruth box followed by `copies` jittered versions.
fn boxes_for(bbox: &BoundingBox, crops: &CropConfig, width: u32, height: u32, rng: &mut ChaCha8Rng) -> Vec<BoundingBox> {
    let mut out = vec![*bbox];
    if crops.jitter > 0.0 {
        out.extend((0..crops.jitter_copies).filter_map(|_| jitter_box(bbox, crops.jitter, width, height, rng)));
    }
    out
}

/// Labelled crops at groundtruth boxes (plus jittered copies when asked).
pub fn classifier_crops(
    manifest: &DatasetManifest,
    records: &[&EatingOccasionRecord],
    crops: &CropConfig,
    seed: u64,
) -> Result<Vec<LabeledCrop>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for rec in records {
        let image = manifest.load_image(rec)?;
        let (w, h) = image.dimensions();
        for ann in &rec.annotations {
            for b in boxes_for(&ann.bbox, crops, w, h, &mut rng) {
                out.push(LabeledCrop {
                    image: crop_region(&image, &b)?,
                    category: ann.category.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Full-image maps feeding the regressor's distribution channel.
pub enum MapProvider<'a> {
    Generated(&'a GeneratorModel),
    Groundtruth,
}

impl<'a> MapProvider<'a> {
    pub fn new(source: MapSource, generator: Option<&'a GeneratorModel>) -> Result<Self> {
        match (source, generator) {
            (MapSource::Generated, Some(g)) => Ok(MapProvider::Generated(g)),
            (MapSource::Generated, None) => Err(PipelineError::Config(
                "generated maps requested but no generator is available".into(),
            )),
            (MapSource::Groundtruth, _) => Ok(MapProvider::Groundtruth),
        }
    }

    fn map_for(&self, manifest: &DatasetManifest, rec: &EatingOccasionRecord, image: &RgbImage) -> Result<EnergyMap> {
        match self {
            MapProvider::Generated(g) => Ok(g.generate_energy_map(image)?),
            MapProvider::Groundtruth => manifest.load_energy_map(rec)?.ok_or_else(|| {
                PipelineError::Config(format!("record {} has no groundtruth energy map", rec.image_id))
            }),
        }
    }
}

/// RGB-Distribution crops at groundtruth boxes with the annotated kcal.
pub fn portion_samples(
    manifest: &DatasetManifest,
    records: &[&EatingOccasionRecord],
    maps: &MapProvider<'_>,
    map_max: f64,
    crops: &CropConfig,
    seed: u64,
) -> Result<Vec<PortionSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for rec in records {
        if rec.annotations.is_empty() {
            continue;
        }
        let image = manifest.load_image(rec)?;
        let map = maps.map_for(manifest, rec, &image)?;
        let (w, h) = image.dimensions();
        for ann in &rec.annotations {
            for b in boxes_for(&ann.bbox, crops, w, h, &mut rng) {
                let fused = fuse_rgbd(&crop_region(&image, &b)?, &crop_energy_map(&map, &b)?, map_max)?;
                out.push(PortionSample {
                    image: fused,
                    kcal: ann.kcal,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jittered_boxes_stay_inside_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = BoundingBox::new(0.0, 50.0, 14.0, 64.0).unwrap();
        for _ in 0..200 {
            if let Some(j) = jitter_box(&b, 0.3, 64, 64, &mut rng) {
                assert!(j.is_within(64, 64));
            }
        }
    }

    #[test]
    fn zero_jitter_keeps_only_the_groundtruth_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = BoundingBox::new(3.0, 4.0, 10.0, 12.0).unwrap();
        let cfg = CropConfig {
            jitter_copies: 3,
            jitter: 0.0,
        };
        assert_eq!(boxes_for(&b, &cfg, 64, 64, &mut rng), vec![b]);
    }
}
