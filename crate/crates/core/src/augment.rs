//! Geometric augmentation that keeps groundtruth attached to the pixels.
//!
//! `flip_h` mirrors across the vertical axis (`x -> W - x`), `flip_v` across
//! the horizontal axis (`y -> H - y`). `rot90` turns the image a quarter turn
//! clockwise and `rot270` counter-clockwise; both swap the frame to `H x W`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{imageops, ImageBuffer, Pixel, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::dataset::{category_image_counts, DatasetManifest, EatingOccasionRecord, SplitTag};
use crate::energy::EnergyMap;
use crate::error::{Error, Result};
use crate::raster::save_rgb;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Rot90,
    Rot270,
    FlipH,
    FlipV,
    FlipBoth,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::Rot90,
        AugmentOp::Rot270,
        AugmentOp::FlipH,
        AugmentOp::FlipV,
        AugmentOp::FlipBoth,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AugmentOp::Rot90 => "rot90",
            AugmentOp::Rot270 => "rot270",
            AugmentOp::FlipH => "flip_h",
            AugmentOp::FlipV => "flip_v",
            AugmentOp::FlipBoth => "flip_both",
        }
    }

    /// Frame size after the op is applied to a `width x height` raster.
    pub fn output_frame(&self, width: u32, height: u32) -> (u32, u32) {
        match self {
            AugmentOp::Rot90 | AugmentOp::Rot270 => (height, width),
            _ => (width, height),
        }
    }

    /// Maps a continuous point of a `width x height` frame.
    pub fn map_point(&self, x: f64, y: f64, width: f64, height: f64) -> (f64, f64) {
        match self {
            AugmentOp::Rot90 => (height - y, x),
            AugmentOp::Rot270 => (y, width - x),
            AugmentOp::FlipH => (width - x, y),
            AugmentOp::FlipV => (x, height - y),
            AugmentOp::FlipBoth => (width - x, height - y),
        }
    }

    /// Applies the op to any raster buffer.
    pub fn apply_raster<P: Pixel + 'static>(
        &self,
        img: &ImageBuffer<P, Vec<P::Subpixel>>,
    ) -> ImageBuffer<P, Vec<P::Subpixel>> {
        match self {
            AugmentOp::Rot90 => imageops::rotate90(img),
            AugmentOp::Rot270 => imageops::rotate270(img),
            AugmentOp::FlipH => imageops::flip_horizontal(img),
            AugmentOp::FlipV => imageops::flip_vertical(img),
            AugmentOp::FlipBoth => imageops::rotate180(img),
        }
    }

    pub fn apply_map(&self, map: &EnergyMap) -> EnergyMap {
        map.with_raster(self.apply_raster(map.raster()))
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown augmentation op {s:?}")))
    }
}

/// Image of `bbox` under `op`: all four corners are mapped and re-sorted into
/// corner order.
pub fn transform_bbox(bbox: &BoundingBox, op: AugmentOp, width: u32, height: u32) -> Result<BoundingBox> {
    bbox.ensure_within(width, height)?;
    let (w, h) = (width as f64, height as f64);
    let corners = [
        (bbox.x1(), bbox.y1()),
        (bbox.x2(), bbox.y1()),
        (bbox.x1(), bbox.y2()),
        (bbox.x2(), bbox.y2()),
    ]
    .map(|(x, y)| op.map_point(x, y, w, h));
    let xs = corners.map(|c| c.0);
    let ys = corners.map(|c| c.1);
    let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
    let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    BoundingBox::new(min(xs), min(ys), max(xs), max(ys))
}

/// A record together with its loaded rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRecord {
    pub record: EatingOccasionRecord,
    pub image: RgbImage,
    pub energy_map: Option<EnergyMap>,
}

impl LoadedRecord {
    pub fn load(manifest: &DatasetManifest, record: &EatingOccasionRecord) -> Result<Self> {
        Ok(Self {
            record: record.clone(),
            image: manifest.load_image(record)?,
            energy_map: manifest.load_energy_map(record)?,
        })
    }
}

pub fn augmented_id(image_id: &str, op: AugmentOp) -> String {
    format!("{image_id}#{op}")
}

/// Transforms the image, the groundtruth map and every box with the same op.
/// Categories and kcal values are copied unchanged.
pub fn augment_record(input: &LoadedRecord, op: AugmentOp) -> Result<LoadedRecord> {
    let (w, h) = input.image.dimensions();
    let mut record = input.record.clone();
    record.image_id = augmented_id(&input.record.image_id, op);
    for ann in &mut record.annotations {
        ann.bbox = transform_bbox(&ann.bbox, op, w, h)?;
    }
    let energy_map = match &input.energy_map {
        Some(m) if m.dimensions() != (w, h) => {
            return Err(Error::ShapeMismatch(format!(
                "record {}: map {:?} vs image {:?}",
                input.record.image_id,
                m.dimensions(),
                (w, h)
            )))
        }
        Some(m) => Some(op.apply_map(m)),
        None => None,
    };
    Ok(LoadedRecord {
        record,
        image: op.apply_raster(&input.image),
        energy_map,
    })
}

/// Number of ops a record receives: `clamp(round(5 * (1 - c_rec / c_max)), 0, 5)`
/// where `c_rec` is the image count of the record's rarest category.
pub fn ops_for_rarity(c_rec: usize, c_max: usize) -> usize {
    if c_max == 0 {
        return 0;
    }
    let k = (AugmentOp::ALL.len() as f64 * (1.0 - c_rec as f64 / c_max as f64)).round();
    k.clamp(0.0, AugmentOp::ALL.len() as f64) as usize
}

/// Ops chosen for every train record, in input order. Deterministic in `seed`.
pub fn plan_balance(manifest: &DatasetManifest, seed: u64) -> Result<Vec<(String, Vec<AugmentOp>)>> {
    let train = manifest.records_in(SplitTag::Train);
    if train.is_empty() {
        return Err(Error::InvalidArgument("balance_augment needs a nonempty train split".into()));
    }
    let counts = category_image_counts(&train);
    let c_max = counts.values().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::with_capacity(train.len());
    for rec in train {
        let rarest = rec.annotations.iter().map(|a| counts[&a.category]).min();
        let k = rarest.map_or(0, |c| ops_for_rarity(c, c_max));
        let mut ops = AugmentOp::ALL.to_vec();
        ops.shuffle(&mut rng);
        ops.truncate(k);
        plan.push((rec.image_id.clone(), ops));
    }
    Ok(plan)
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// Expands the train split with frequency-balanced geometric ops.
///
/// Originals are retained; each augmented record follows its source in the
/// output. Non-train records pass through untouched. Augmented rasters are
/// written under `out_dir` and the returned manifest is rooted there.
pub fn balance_augment(manifest: &DatasetManifest, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let plan: BTreeMap<String, Vec<AugmentOp>> = plan_balance(manifest, seed)?.into_iter().collect();
    let mut records = Vec::new();
    let mut tags = BTreeMap::new();
    let absolutize = |p: &Path| -> std::path::PathBuf {
        let full = manifest.resolve(p);
        std::path::absolute(&full).unwrap_or(full)
    };
    for rec in &manifest.records {
        let mut original = rec.clone();
        original.image_path = absolutize(&rec.image_path);
        original.energy_map_path = rec.energy_map_path.as_deref().map(absolutize);
        records.push(original);
        let tag = manifest.split_of(&rec.image_id).unwrap_or(SplitTag::Train);
        tags.insert(rec.image_id.clone(), tag);
        let Some(ops) = plan.get(&rec.image_id) else { continue };
        if ops.is_empty() {
            continue;
        }
        let loaded = LoadedRecord::load(manifest, rec)?;
        for &op in ops {
            let aug = augment_record(&loaded, op)?;
            let stem = file_stem(&aug.record.image_id);
            let image_rel = Path::new("images").join(format!("{stem}.png"));
            save_rgb(&aug.image, &out_dir.join(&image_rel))?;
            let mut out_rec = aug.record.clone();
            out_rec.image_path = image_rel;
            if let Some(map) = &aug.energy_map {
                let map_rel = Path::new("maps").join(format!("{stem}.png"));
                map.save_png16(&out_dir.join(&map_rel))?;
                out_rec.energy_map_path = Some(map_rel);
            }
            tags.insert(out_rec.image_id.clone(), SplitTag::Train);
            records.push(out_rec);
        }
    }
    let mut out = DatasetManifest::new(manifest.label_set.clone(), records, out_dir);
    out.split_tags = Some(tags);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FoodAnnotation;
    use image::Rgb;
    use proptest::prelude::*;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn flip_h_example() {
        let out = transform_bbox(&bb(10.0, 20.0, 30.0, 40.0), AugmentOp::FlipH, 100, 60).unwrap();
        assert_eq!(out, bb(70.0, 20.0, 90.0, 40.0));
    }

    #[test]
    fn rot90_matches_pixel_rotation() {
        // A single lit pixel must land inside the rotated box of its unit square.
        let (w, h) = (7u32, 4u32);
        let mut img = RgbImage::new(w, h);
        img.put_pixel(5, 1, Rgb([255, 0, 0]));
        let b = bb(5.0, 1.0, 6.0, 2.0);
        for op in AugmentOp::ALL {
            let rimg = op.apply_raster(&img);
            let rb = transform_bbox(&b, op, w, h).unwrap();
            let (x, y) = (rb.x1() as u32, rb.y1() as u32);
            assert_eq!(rb.area(), 1.0);
            assert_eq!(rimg.get_pixel(x, y).0, [255, 0, 0], "{op}");
            assert_eq!(rimg.dimensions(), op.output_frame(w, h));
        }
    }

    #[test]
    fn balance_rule_monotone() {
        assert_eq!(ops_for_rarity(50, 50), 0);
        assert_eq!(ops_for_rarity(10, 50), 4);
        assert_eq!(ops_for_rarity(0, 50), 5);
        let mut last = usize::MAX;
        for c in 0..=50 {
            let k = ops_for_rarity(c, 50);
            assert!(k <= last);
            last = k;
        }
    }

    fn rec(id: &str, cats: &[&str]) -> EatingOccasionRecord {
        EatingOccasionRecord {
            image_id: id.into(),
            image_path: "x.png".into(),
            energy_map_path: None,
            energy_scale: 1.0,
            annotations: cats
                .iter()
                .map(|c| FoodAnnotation { bbox: bb(0.0, 0.0, 1.0, 1.0), category: c.to_string(), kcal: 1.0 })
                .collect(),
        }
    }

    #[test]
    fn plan_counts_follow_rarity() {
        let mut records: Vec<_> = (0..50).map(|i| rec(&format!("c{i}"), &["common"])).collect();
        records.extend((0..10).map(|i| rec(&format!("r{i}"), &["rare"])));
        let m = DatasetManifest::new(vec!["common".into(), "rare".into()], records, "");
        let plan = plan_balance(&m, 1).unwrap();
        for (id, ops) in &plan {
            if id.starts_with('c') {
                assert_eq!(ops.len(), 0);
            } else {
                assert_eq!(ops.len(), 4);
            }
            let mut uniq = ops.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), ops.len(), "sampled without replacement");
        }
        assert_eq!(plan, plan_balance(&m, 1).unwrap());
    }

    #[test]
    fn plan_uniform_counts_are_equal() {
        let records: Vec<_> = (0..12)
            .map(|i| rec(&format!("x{i}"), &[["a", "b", "c"][i % 3]]))
            .collect();
        let m = DatasetManifest::new(vec!["a".into(), "b".into(), "c".into()], records, "");
        let plan = plan_balance(&m, 3).unwrap();
        assert!(plan.iter().all(|(_, ops)| ops.len() == plan[0].1.len()));
    }

    #[test]
    fn empty_train_split_rejected() {
        let mut m = DatasetManifest::new(vec!["a".into()], vec![rec("v", &["a"])], "");
        m.split_tags = Some([("v".to_string(), SplitTag::Val)].into_iter().collect());
        assert!(plan_balance(&m, 0).is_err());
    }

    /// Boxes on a 1/8-pixel grid, where frame reflections are exact in f64.
    fn arb_box() -> impl Strategy<Value = (BoundingBox, u32, u32)> {
        (8u32..60, 8u32..60).prop_flat_map(|(w, h)| {
            (0..(w * 8 - 4), 0..(h * 8 - 4)).prop_flat_map(move |(x1, y1)| {
                ((x1 + 1)..=(w * 8), (y1 + 1)..=(h * 8)).prop_map(move |(x2, y2)| {
                    let q = |v: u32| v as f64 / 8.0;
                    (bb(q(x1), q(y1), q(x2), q(y2)), w, h)
                })
            })
        })
    }

    proptest! {
        #[test]
        fn boxes_stay_valid_in_new_frame((b, w, h) in arb_box()) {
            for op in AugmentOp::ALL {
                let out = transform_bbox(&b, op, w, h).unwrap();
                let (fw, fh) = op.output_frame(w, h);
                prop_assert!(out.is_within(fw, fh));
                prop_assert!((out.area() - b.area()).abs() < 1e-9 * b.area().max(1.0));
            }
        }

        #[test]
        fn box_group_laws((b, w, h) in arb_box()) {
            let t = |b: &BoundingBox, op, w, h| transform_bbox(b, op, w, h).unwrap();
            prop_assert_eq!(t(&t(&b, AugmentOp::FlipH, w, h), AugmentOp::FlipH, w, h), b);
            prop_assert_eq!(t(&t(&b, AugmentOp::FlipV, w, h), AugmentOp::FlipV, w, h), b);
            prop_assert_eq!(t(&t(&b, AugmentOp::FlipBoth, w, h), AugmentOp::FlipBoth, w, h), b);
            prop_assert_eq!(t(&t(&b, AugmentOp::FlipV, w, h), AugmentOp::FlipH, w, h), t(&b, AugmentOp::FlipBoth, w, h));
            prop_assert_eq!(t(&t(&b, AugmentOp::Rot90, w, h), AugmentOp::Rot270, h, w), b);
            let mut r = b;
            let (mut fw, mut fh) = (w, h);
            for _ in 0..4 {
                r = t(&r, AugmentOp::Rot90, fw, fh);
                std::mem::swap(&mut fw, &mut fh);
            }
            prop_assert_eq!((r, fw, fh), (b, w, h));
        }

        #[test]
        fn arbitrary_float_boxes_round_trip(x1 in 0.0f64..30.0, y1 in 0.0f64..30.0, dw in 0.01f64..30.0, dh in 0.01f64..30.0) {
            let b = bb(x1, y1, x1 + dw, y1 + dh);
            let twice = transform_bbox(&transform_bbox(&b, AugmentOp::FlipBoth, 64, 64).unwrap(), AugmentOp::FlipBoth, 64, 64).unwrap();
            for (a, e) in twice.to_array().iter().zip(b.to_array()) {
                prop_assert!((a - e).abs() < 1e-9);
            }
        }
    }
}
