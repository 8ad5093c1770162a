use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::OccasionTotal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub threshold: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub ap_50: Option<f64>,
    pub ap_75: Option<f64>,
}

/// Portion-size accuracy of one regressor input variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortionMethodReport {
    pub name: String,
    /// Item-level mean absolute error in kcal over matched detections.
    pub mae: f64,
    /// Occasion-level error percentage.
    pub ep: f64,
    pub matched_items: usize,
    pub occasion_pairs: Vec<OccasionTotal>,
}

/// Everything the `evaluate` and `infer` commands report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub map_50: f64,
    pub map_75: f64,
    pub map_50_95: f64,
    pub thresholds: Vec<ThresholdEntry>,
    pub per_category_ap: BTreeMap<String, CategoryAp>,
    pub mae: f64,
    pub ep: f64,
    pub occasion_pairs: Vec<OccasionTotal>,
    /// The full method first, then input ablations.
    pub methods: Vec<PortionMethodReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let fmt_ap = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "config {}", self.config_hash);
        let _ = writeln!(out);
        let _ = writeln!(out, "| mAP@.5 | mAP@.75 | mAP@[.5,.95] |");
        let _ = writeln!(out, "|--------|---------|--------------|");
        let _ = writeln!(out, "| {:.4} | {:.4}  | {:.4}       |", self.map_50, self.map_75, self.map_50_95);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<24} {:>8} {:>8}", "category", "AP@.5", "AP@.75");
        for (cat, ap) in &self.per_category_ap {
            let _ = writeln!(out, "{:<24} {:>8} {:>8}", cat, fmt_ap(ap.ap_50), fmt_ap(ap.ap_75));
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<24} {:>12} {:>10} {:>8}", "method", "MAE (kcal)", "EP (%)", "items");
        for m in &self.methods {
            let _ = writeln!(out, "{:<24} {:>12.2} {:>10.2} {:>8}", m.name, m.mae, m.ep, m.matched_items);
        }
        out
    }
}
