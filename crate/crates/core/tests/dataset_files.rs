use std::collections::BTreeMap;

use foodlens_core::augment::{augment_record, balance_augment, LoadedRecord};
use foodlens_core::{
    crop_energy_map, generate_dataset, integrate_energy, load_manifest, split_dataset, AugmentOp, SceneConfig, SplitTag,
};

fn multiset(rec: &foodlens_core::EatingOccasionRecord) -> Vec<(String, u64)> {
    let mut v: Vec<(String, u64)> = rec.annotations.iter().map(|a| (a.category.clone(), a.kcal.to_bits())).collect();
    v.sort();
    v
}

#[test]
fn generated_dataset_round_trips_and_conserves_energy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig::default();
    let m = generate_dataset(12, &cfg, 5, dir.path()).unwrap();
    let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.records, m.records);
    assert_eq!(loaded.label_set, m.label_set);
    loaded.validate(true).unwrap();

    for rec in &loaded.records {
        let map = loaded.load_energy_map(rec).unwrap().expect("synthetic scenes carry maps");
        let mut sum = 0.0;
        for a in &rec.annotations {
            let kcal = integrate_energy(&crop_energy_map(&map, &a.bbox).unwrap());
            assert_eq!(kcal, a.kcal, "{} {}", rec.image_id, a.category);
            sum += a.kcal;
        }
        assert!((rec.total_kcal() - sum).abs() < 1e-9);
    }
}

#[test]
fn example_sized_manifest_with_many_categories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig::with_generated_categories(31);
    let m = generate_dataset(154, &cfg, 1, dir.path()).unwrap();
    assert_eq!(m.records.len(), 154);
    assert_eq!(m.label_set.len(), 31);
    let split = split_dataset(&m, 0.2, 0.1, 9).unwrap();
    let (tr, va, te) = (
        split.records_in(SplitTag::Train).len(),
        split.records_in(SplitTag::Val).len(),
        split.records_in(SplitTag::Test).len(),
    );
    assert_eq!(tr + va + te, 154);
    assert!(va > 0 && te > 0);
    assert_eq!(split_dataset(&m, 0.2, 0.1, 9).unwrap(), split);
}

#[test]
fn augmentation_laws_hold_on_loaded_records() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(4, &SceneConfig::default(), 2, dir.path()).unwrap();
    for rec in &m.records {
        let orig = LoadedRecord::load(&m, rec).unwrap();
        let strip = |mut r: LoadedRecord| {
            r.record.image_id = orig.record.image_id.clone();
            r
        };
        let apply = |r: &LoadedRecord, ops: &[AugmentOp]| ops.iter().fold(r.clone(), |acc, &op| strip(augment_record(&acc, op).unwrap()));

        assert_eq!(apply(&orig, &[AugmentOp::Rot90; 4]), orig);
        assert_eq!(apply(&orig, &[AugmentOp::Rot90, AugmentOp::Rot270]), orig);
        assert_eq!(apply(&orig, &[AugmentOp::FlipH; 2]), orig);
        assert_eq!(apply(&orig, &[AugmentOp::FlipV; 2]), orig);
        assert_eq!(apply(&orig, &[AugmentOp::FlipBoth]), apply(&orig, &[AugmentOp::FlipV, AugmentOp::FlipH]));
        for op in AugmentOp::ALL {
            let out = augment_record(&orig, op).unwrap();
            assert_eq!(multiset(&out.record), multiset(&orig.record));
            let map = out.energy_map.as_ref().unwrap();
            for a in &out.record.annotations {
                assert_eq!(integrate_energy(&crop_energy_map(map, &a.bbox).unwrap()), a.kcal);
            }
        }
    }
}

#[test]
fn balancing_writes_files_and_favours_rare_categories() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(20, &SceneConfig::default(), 8, &dir.path().join("data")).unwrap();
    let out = balance_augment(&m, 4, &dir.path().join("aug")).unwrap();
    assert!(out.records.len() >= m.records.len());
    out.validate(true).unwrap();
    for r in &m.records {
        assert!(out.record(&r.image_id).is_some(), "originals are kept");
    }
    let again = balance_augment(&m, 4, &dir.path().join("aug2")).unwrap();
    let ids = |m: &foodlens_core::DatasetManifest| m.records.iter().map(|r| r.image_id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&out), ids(&again));
    let per_cat = |m: &foodlens_core::DatasetManifest| {
        let mut c: BTreeMap<String, usize> = BTreeMap::new();
        for r in &m.records {
            for a in &r.annotations {
                *c.entry(a.category.clone()).or_default() += 1;
            }
        }
        c
    };
    let (before, after) = (per_cat(&m), per_cat(&out));
    let spread = |c: &BTreeMap<String, usize>| {
        let max = *c.values().max().unwrap() as f64;
        let min = *c.values().min().unwrap() as f64;
        max / min
    };
    assert!(spread(&after) <= spread(&before) + 1e-9, "{before:?} -> {after:?}");
}
