//! Brute-force reference implementations for the evaluation metrics.
//!
//! Boxes are drawn on an integer grid so IoU can be measured by counting
//! unit cells. Every oracle avoids the code paths of the library version.

#![allow(dead_code)]

use foodlens_core::metrics::Prediction;
use foodlens_core::{BoundingBox, Detection, FoodAnnotation};
use rand::Rng;

pub const GRID: i64 = 24;
pub const CATEGORIES: [&str; 3] = ["rice", "apple", "soup"];

/// IoU by counting covered unit cells.
pub fn iou_cells(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let covers = |r: &BoundingBox, x: i64, y: i64| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx > r.x1() && cx < r.x2() && cy > r.y1() && cy < r.y2()
    };
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..GRID {
        for x in 0..GRID {
            let (ia, ib) = (covers(a, x, y), covers(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn random_box(rng: &mut impl Rng) -> BoundingBox {
    let x1 = rng.random_range(0..GRID - 1);
    let y1 = rng.random_range(0..GRID - 1);
    let x2 = rng.random_range(x1 + 1..=GRID);
    let y2 = rng.random_range(y1 + 1..=GRID);
    BoundingBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap()
}

/// Perturbs a box by up to two cells per side so that matches at every
/// threshold occur.
pub fn nearby_box(b: &BoundingBox, rng: &mut impl Rng) -> BoundingBox {
    let mut j = |v: f64| (v as i64 + rng.random_range(-2..=2)).clamp(0, GRID);
    let (mut x1, mut y1, mut x2, mut y2) = (j(b.x1()), j(b.y1()), j(b.x2()), j(b.y2()));
    if x2 <= x1 {
        (x1, x2) = (x1.min(GRID - 1), x1.min(GRID - 1) + 1);
    }
    if y2 <= y1 {
        (y1, y2) = (y1.min(GRID - 1), y1.min(GRID - 1) + 1);
    }
    BoundingBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap()
}

/// A random image: up to 10 groundtruth items and up to 10 predictions, most
/// of them near some groundtruth. Scores come from a small set so ties occur.
pub fn random_instance(rng: &mut impl Rng) -> (Vec<Prediction>, Vec<FoodAnnotation>) {
    let n_gt = rng.random_range(0..=10);
    let gts: Vec<FoodAnnotation> = (0..n_gt)
        .map(|_| FoodAnnotation {
            bbox: random_box(rng),
            category: CATEGORIES[rng.random_range(0..CATEGORIES.len())].to_string(),
            kcal: rng.random_range(10.0..500.0),
        })
        .collect();
    let n_pred = rng.random_range(0..=10);
    let preds = (0..n_pred)
        .map(|_| {
            let bbox = if !gts.is_empty() && rng.random_bool(0.7) {
                nearby_box(&gts[rng.random_range(0..gts.len())].bbox, rng)
            } else {
                random_box(rng)
            };
            let score = rng.random_range(1..=8) as f64 / 8.0;
            Prediction {
                detection: Detection::new(bbox, score).unwrap(),
                category: CATEGORIES[rng.random_range(0..CATEGORIES.len())].to_string(),
            }
        })
        .collect();
    (preds, gts)
}

/// `(pred_index, matched_gt)` in processing order, per category.
pub type OracleMatch = Vec<(String, Vec<(usize, Option<usize>)>)>;

/// Greedy matching written as an explicit search: for each prediction by
/// descending score (stable on ties), list every admissible groundtruth and
/// take the best by (IoU desc, index asc).
pub fn match_oracle(preds: &[Prediction], gts: &[FoodAnnotation], thr: f64) -> OracleMatch {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // Insertion sort keeps equal scores in index order.
    for i in 1..order.len() {
        let mut k = i;
        while k > 0 && preds[order[k - 1]].detection.score < preds[order[k]].detection.score {
            order.swap(k - 1, k);
            k -= 1;
        }
    }
    let mut used = vec![false; gts.len()];
    let mut out: OracleMatch = Vec::new();
    for &i in &order {
        let p = &preds[i];
        let mut candidates: Vec<(f64, usize)> = Vec::new();
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.category != p.category {
                continue;
            }
            let v = iou_cells(&p.detection.bbox, &g.bbox);
            if v > thr {
                candidates.push((v, j));
            }
        }
        let mut pick: Option<(f64, usize)> = None;
        for c in candidates {
            pick = match pick {
                None => Some(c),
                Some(b) if c.0 > b.0 || (c.0 == b.0 && c.1 < b.1) => Some(c),
                keep => keep,
            };
        }
        if let Some((_, j)) = pick {
            used[j] = true;
        }
        match out.iter_mut().find(|(c, _)| *c == p.category) {
            Some((_, v)) => v.push((i, pick.map(|p| p.1))),
            None => out.push((p.category.clone(), vec![(i, pick.map(|p| p.1))])),
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// All-point AP as a sum of rectangles: every true positive adds `1 / n_gt`
/// of recall at the best precision reachable from its rank onwards.
pub fn ap_oracle(ranked: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if ranked.is_empty() { None } else { Some(0.0) };
    }
    let precision_at = |k: usize| ranked[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64;
    let mut ap = 0.0;
    for k in 0..ranked.len() {
        if ranked[k] {
            let best = (k..ranked.len()).map(precision_at).fold(0.0, f64::max);
            ap += best / n_gt as f64;
        }
    }
    Some(ap)
}

pub fn mae_oracle(preds: &[f64], gts: &[f64]) -> f64 {
    let mut errs: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| if p > g { p - g } else { g - p }).collect();
    errs.sort_by(f64::total_cmp);
    errs.iter().sum::<f64>() / errs.len() as f64
}

pub fn ep_oracle(preds: &[f64], gts: &[f64]) -> f64 {
    let err = mae_oracle(preds, gts) * preds.len() as f64;
    let total: f64 = gts.iter().sum();
    err / total * 100.0
}

/// Agreement up to floating-point summation order.
pub fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Default, Clone)]
pub struct EquivalenceReport {
    pub instances: usize,
    pub iou_mismatches: usize,
    pub match_mismatches: usize,
    pub ap_mismatches: usize,
    pub mae_mismatches: usize,
    pub ep_mismatches: usize,
}

impl EquivalenceReport {
    pub fn total_mismatches(&self) -> usize {
        self.iou_mismatches + self.match_mismatches + self.ap_mismatches + self.mae_mismatches + self.ep_mismatches
    }
}

/// Runs every library metric against its oracle on `n` random instances.
pub fn check_equivalence(n: usize, seed: u64) -> EquivalenceReport {
    use foodlens_core::metrics::{average_precision, error_percentage, iou, mae, match_detections};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut r = EquivalenceReport {
        instances: n,
        ..Default::default()
    };
    for _ in 0..n {
        let (preds, gts) = random_instance(&mut rng);

        for p in &preds {
            for g in &gts {
                if iou(&p.detection.bbox, &g.bbox) != iou_cells(&p.detection.bbox, &g.bbox) {
                    r.iou_mismatches += 1;
                }
            }
        }

        let thr = [0.5, 0.75, 0.3][rng.random_range(0..3)];
        let lib = match_detections(&preds, &gts, thr).unwrap();
        let oracle = match_oracle(&preds, &gts, thr);
        let lib_pairs: OracleMatch = lib
            .per_category
            .iter()
            .filter(|(_, c)| !c.entries.is_empty())
            .map(|(k, c)| (k.clone(), c.entries.iter().map(|e| (e.pred_index, e.matched_gt)).collect()))
            .collect();
        if lib_pairs != oracle {
            r.match_mismatches += 1;
        }

        for (cat, c) in &lib.per_category {
            let ranked: Vec<bool> = c.entries.iter().map(|e| e.is_tp).collect();
            let n_gt = gts.iter().filter(|g| &g.category == cat).count();
            let ok = match (average_precision(&ranked, n_gt), ap_oracle(&ranked, n_gt)) {
                (Some(a), Some(b)) => same(a, b),
                (a, b) => a == b,
            };
            if !ok {
                r.ap_mismatches += 1;
            }
        }

        if !gts.is_empty() {
            let g: Vec<f64> = gts.iter().map(|g| g.kcal).collect();
            let p: Vec<f64> = g.iter().map(|v| (v + rng.random_range(-150.0..150.0)).max(0.0)).collect();
            if !same(mae(&p, &g).unwrap(), mae_oracle(&p, &g)) {
                r.mae_mismatches += 1;
            }
            if !same(error_percentage(&p, &g).unwrap(), ep_oracle(&p, &g)) {
                r.ep_mismatches += 1;
            }
        }
    }
    r
}
