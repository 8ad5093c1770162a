//! Canonical data model and manifest I/O.
//!
//! A manifest is a single JSON document:
//!
//! ```json
//! {
//!   "label_set": ["rice", "apple"],
//!   "records": [{
//!     "image_id": "scene_00000",
//!     "image_path": "images/scene_00000.png",
//!     "energy_map_path": "maps/scene_00000.png",
//!     "energy_scale": 0.01,
//!     "annotations": [{"bbox": [4, 5, 20, 18], "category": "rice", "kcal": 245.5}]
//!   }],
//!   "split": {"scene_00000": "train"}
//! }
//! ```
//!
//! Relative paths resolve against the directory holding the manifest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::energy::EnergyMap;
use crate::error::{Error, Result};
use crate::raster::load_rgb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoodAnnotation {
    pub bbox: BoundingBox,
    pub category: String,
    pub kcal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EatingOccasionRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    #[serde(default)]
    pub energy_map_path: Option<PathBuf>,
    pub energy_scale: f64,
    #[serde(default)]
    pub annotations: Vec<FoodAnnotation>,
}

impl EatingOccasionRecord {
    pub fn total_kcal(&self) -> f64 {
        self.annotations.iter().map(|a| a.kcal).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub label_set: Vec<String>,
    pub records: Vec<EatingOccasionRecord>,
    #[serde(default, rename = "split", skip_serializing_if = "Option::is_none")]
    pub split_tags: Option<BTreeMap<String, SplitTag>>,
    /// Directory that relative record paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(label_set: Vec<String>, records: Vec<EatingOccasionRecord>, root: impl Into<PathBuf>) -> Self {
        Self {
            label_set,
            records,
            split_tags: None,
            root: root.into(),
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn record(&self, image_id: &str) -> Option<&EatingOccasionRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn split_of(&self, image_id: &str) -> Option<SplitTag> {
        self.split_tags.as_ref().and_then(|t| t.get(image_id).copied())
    }

    /// Records carrying `tag`. Without split tags every record counts as train.
    pub fn records_in(&self, tag: SplitTag) -> Vec<&EatingOccasionRecord> {
        self.records
            .iter()
            .filter(|r| match &self.split_tags {
                Some(tags) => tags.get(&r.image_id) == Some(&tag),
                None => tag == SplitTag::Train,
            })
            .collect()
    }

    /// Copy of the manifest restricted to the records carrying `tag`.
    pub fn subset(&self, tag: SplitTag) -> DatasetManifest {
        let records: Vec<_> = self.records_in(tag).into_iter().cloned().collect();
        let split = self.split_tags.as_ref().map(|_| {
            records
                .iter()
                .map(|r| (r.image_id.clone(), tag))
                .collect::<BTreeMap<_, _>>()
        });
        DatasetManifest {
            label_set: self.label_set.clone(),
            records,
            split_tags: split,
            root: self.root.clone(),
        }
    }

    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.label_set.iter().position(|c| c == category)
    }

    pub fn load_image(&self, record: &EatingOccasionRecord) -> Result<RgbImage> {
        load_rgb(&self.resolve(&record.image_path))
    }

    pub fn load_energy_map(&self, record: &EatingOccasionRecord) -> Result<Option<EnergyMap>> {
        match &record.energy_map_path {
            Some(p) => EnergyMap::load_png16(&self.resolve(p), record.energy_scale).map(Some),
            None => Ok(None),
        }
    }

    /// Checks every manifest invariant; `check_files` also opens the referenced
    /// rasters to validate box bounds and map dimensions.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        let labels: HashSet<&str> = self.label_set.iter().map(String::as_str).collect();
        if labels.len() != self.label_set.len() {
            return Err(Error::InvalidArgument("label_set contains duplicates".into()));
        }
        let mut seen = HashSet::new();
        for rec in &self.records {
            let id = rec.image_id.as_str();
            if id.is_empty() {
                return Err(Error::record(id, "image_id", "empty identifier"));
            }
            if !seen.insert(id) {
                return Err(Error::record(id, "image_id", "duplicate identifier"));
            }
            if !(rec.energy_scale.is_finite() && rec.energy_scale > 0.0) {
                return Err(Error::record(id, "energy_scale", format!("must be positive, got {}", rec.energy_scale)));
            }
            for (i, ann) in rec.annotations.iter().enumerate() {
                if !labels.contains(ann.category.as_str()) {
                    return Err(Error::UnknownCategory {
                        image_id: id.to_string(),
                        category: ann.category.clone(),
                    });
                }
                if !(ann.kcal.is_finite() && ann.kcal >= 0.0) {
                    return Err(Error::record(id, format!("annotations[{i}].kcal"), format!("must be nonnegative, got {}", ann.kcal)));
                }
            }
            if check_files {
                let img_path = self.resolve(&rec.image_path);
                let (w, h) = image::image_dimensions(&img_path)
                    .map_err(|e| Error::record(id, "image_path", format!("{}: {e}", img_path.display())))?;
                for (i, ann) in rec.annotations.iter().enumerate() {
                    if !ann.bbox.is_within(w, h) {
                        return Err(Error::record(
                            id,
                            format!("annotations[{i}].bbox"),
                            format!("{} exceeds image bounds {w}x{h}", ann.bbox),
                        ));
                    }
                }
                if let Some(mp) = &rec.energy_map_path {
                    let map_path = self.resolve(mp);
                    let dims = image::image_dimensions(&map_path)
                        .map_err(|e| Error::record(id, "energy_map_path", format!("{}: {e}", map_path.display())))?;
                    if dims != (w, h) {
                        return Err(Error::record(
                            id,
                            "energy_map_path",
                            format!("map is {}x{} but image is {w}x{h}", dims.0, dims.1),
                        ));
                    }
                }
            }
        }
        if let Some(tags) = &self.split_tags {
            for key in tags.keys() {
                if !seen.contains(key.as_str()) {
                    return Err(Error::record(key.as_str(), "split", "tag for unknown image_id"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse {
            path: self.root.clone(),
            source: e,
        })
    }
}

/// Reads and validates a manifest, including the referenced raster files.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        source: e,
    })?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate(true)?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = manifest.to_json()?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Tags every record as train, val or test. The split is per eating occasion
/// so crops of one scene never straddle two splits.
///
/// `round(frac * n)` records go to each held-out split, which keeps both within
/// one record of the requested fraction.
pub fn split_dataset(manifest: &DatasetManifest, val_frac: f64, test_frac: f64, seed: u64) -> Result<DatasetManifest> {
    let ok = |f: f64| f.is_finite() && f >= 0.0;
    if !ok(val_frac) || !ok(test_frac) || val_frac + test_frac >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must satisfy 0 <= val + test < 1, got val={val_frac} test={test_frac}"
        )));
    }
    let n = manifest.records.len();
    let n_test = (test_frac * n as f64).round() as usize;
    let n_val = ((val_frac * n as f64).round() as usize).min(n - n_test.min(n));

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut tags = BTreeMap::new();
    for (rank, &idx) in order.iter().enumerate() {
        let tag = if rank < n_test {
            SplitTag::Test
        } else if rank < n_test + n_val {
            SplitTag::Val
        } else {
            SplitTag::Train
        };
        tags.insert(manifest.records[idx].image_id.clone(), tag);
    }
    let mut out = manifest.clone();
    out.split_tags = Some(tags);
    Ok(out)
}

/// Per-category count of records containing at least one item of that category.
pub fn category_image_counts(records: &[&EatingOccasionRecord]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for rec in records {
        let cats: HashSet<&str> = rec.annotations.iter().map(|a| a.category.as_str()).collect();
        for c in cats {
            *counts.entry(c.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, anns: Vec<FoodAnnotation>) -> EatingOccasionRecord {
        EatingOccasionRecord {
            image_id: id.into(),
            image_path: format!("images/{id}.png").into(),
            energy_map_path: None,
            energy_scale: 1.0,
            annotations: anns,
        }
    }

    fn ann(cat: &str, kcal: f64) -> FoodAnnotation {
        FoodAnnotation {
            bbox: BoundingBox::new(1.0, 1.0, 4.0, 4.0).unwrap(),
            category: cat.into(),
            kcal,
        }
    }

    fn manifest(n: usize) -> DatasetManifest {
        let records = (0..n).map(|i| record(&format!("r{i:03}"), vec![ann("a", 1.0)])).collect();
        DatasetManifest::new(vec!["a".into(), "b".into()], records, "")
    }

    #[test]
    fn split_fifteen_fifteen_seventy() {
        let m = split_dataset(&manifest(100), 0.15, 0.15, 7).unwrap();
        assert_eq!(m.records_in(SplitTag::Train).len(), 70);
        assert_eq!(m.records_in(SplitTag::Val).len(), 15);
        assert_eq!(m.records_in(SplitTag::Test).len(), 15);
    }

    #[test]
    fn split_degenerate_and_deterministic() {
        let m = split_dataset(&manifest(10), 0.0, 0.0, 3).unwrap();
        assert_eq!(m.records_in(SplitTag::Train).len(), 10);
        let a = split_dataset(&manifest(50), 0.2, 0.1, 11).unwrap();
        let b = split_dataset(&manifest(50), 0.2, 0.1, 11).unwrap();
        assert_eq!(a.split_tags, b.split_tags);
        let c = split_dataset(&manifest(50), 0.2, 0.1, 12).unwrap();
        assert_ne!(a.split_tags, c.split_tags);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(split_dataset(&manifest(5), 0.5, 0.5, 0).is_err());
        assert!(split_dataset(&manifest(5), -0.1, 0.2, 0).is_err());
        assert!(split_dataset(&manifest(5), f64::NAN, 0.2, 0).is_err());
    }

    #[test]
    fn validate_flags_unknown_category() {
        let mut m = manifest(2);
        m.records[1].annotations.push(ann("pizza", 3.0));
        match m.validate(false) {
            Err(Error::UnknownCategory { image_id, category }) => {
                assert_eq!(image_id, "r001");
                assert_eq!(category, "pizza");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_flags_duplicates_and_negative_kcal() {
        let mut m = manifest(2);
        m.records[1].image_id = "r000".into();
        assert!(m.validate(false).is_err());
        let mut m = manifest(2);
        m.records[0].annotations[0].kcal = -1.0;
        assert!(m.validate(false).unwrap_err().to_string().contains("kcal"));
    }

    #[test]
    fn image_counts_per_category() {
        let recs = [
            record("x", vec![ann("a", 1.0), ann("a", 2.0), ann("b", 1.0)]),
            record("y", vec![ann("b", 1.0)]),
        ];
        let refs: Vec<_> = recs.iter().collect();
        let c = category_image_counts(&refs);
        assert_eq!(c["a"], 1);
        assert_eq!(c["b"], 2);
    }
}
