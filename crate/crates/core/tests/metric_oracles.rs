mod support;

use foodlens_core::metrics::{average_precision, coco_thresholds, mean_average_precision, ApInterpolation, ImageEval};
use support::oracles::{ap_oracle, check_equivalence, iou_cells, random_instance};

#[test]
fn library_metrics_agree_with_oracles() {
    let r = check_equivalence(1500, 11);
    assert_eq!(r.total_mismatches(), 0, "{r:?}");
}

#[test]
fn oracle_iou_on_known_boxes() {
    let a = foodlens_core::BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
    let b = foodlens_core::BoundingBox::new(2.0, 2.0, 6.0, 6.0).unwrap();
    assert!((iou_cells(&a, &b) - 4.0 / 28.0).abs() < 1e-15);
    assert_eq!(iou_cells(&a, &a), 1.0);
}

#[test]
fn ap_of_known_rankings() {
    assert_eq!(average_precision(&[true, true], 2), Some(1.0));
    assert_eq!(ap_oracle(&[true, true], 2), Some(1.0));
    // TP, FP, TP with 2 gt: 0.5*1 + 0.5*(2/3)
    let expected = 0.5 + 0.5 * 2.0 / 3.0;
    assert!((average_precision(&[true, false, true], 2).unwrap() - expected).abs() < 1e-15);
    assert_eq!(average_precision(&[], 0), None);
    assert_eq!(average_precision(&[false], 0), Some(0.0));
}

#[test]
fn sweep_has_ten_thresholds_and_their_mean() {
    let t = coco_thresholds();
    assert_eq!(t, vec![0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]);
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let images: Vec<ImageEval> = (0..20)
        .map(|i| {
            let (predictions, groundtruth) = random_instance(&mut rng);
            ImageEval {
                image_id: format!("img{i}"),
                predictions,
                groundtruth,
            }
        })
        .collect();
    let s = mean_average_precision(&images, &t, ApInterpolation::AllPoint).unwrap();
    assert_eq!(s.per_threshold.len(), 10);
    let mean = s.per_threshold.iter().map(|p| p.map).sum::<f64>() / 10.0;
    assert_eq!(s.mean, mean);
}
