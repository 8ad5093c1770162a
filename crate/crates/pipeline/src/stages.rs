//! One function per CLI command. Each reads what earlier stages wrote under
//! the configured directories and writes its own artifacts.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use foodlens_core::raster::save_rgb;
use foodlens_core::{
    balance_augment, generate_dataset, load_manifest, save_manifest, split_dataset, DatasetManifest, EvalReport,
    FoodAnnotation, SplitTag,
};
use foodlens_models::classifier::{train_classifier, ClassifierModel};
use foodlens_models::detector::{train_detector, DetectorModel};
use foodlens_models::gan::{gan_samples, train_energy_gan, GeneratorModel};
use foodlens_models::regressor::{train_regressor, ChannelMask, RegressorHyper, RegressorModel};

use crate::config::{PipelineConfig, Stage};
use crate::data::{classifier_crops, portion_samples, MapProvider};
use crate::error::{PipelineError, Result};
use crate::eval::build_eval_report;
use crate::io::{ensure_parent, read_json, write_json, write_text};
use crate::pipeline::{run_end_to_end, Models, OccasionResult};
use crate::plot::{plot_scatter, ScatterSeries};
use crate::render::{load_font, render_annotated};

#[derive(Serialize)]
struct RunLogEntry<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    outputs: Vec<String>,
}

/// Appends one JSON line describing a finished command to `out_dir/run_log.jsonl`.
pub fn append_run_log(config: &PipelineConfig, command: &str, outputs: &[PathBuf]) -> Result<()> {
    let path = config.paths.out_dir.join("run_log.jsonl");
    ensure_parent(&path)?;
    let entry = RunLogEntry {
        command,
        config_hash: config.hash(),
        seed: config.seed,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| PipelineError::io(&path, e))?;
    writeln!(f, "{}", serde_json::to_string(&entry).expect("log entry serializes")).map_err(|e| PipelineError::io(&path, e))
}

/// Renders the configured number of synthetic scenes and tags the splits.
pub fn generate_synthetic(config: &PipelineConfig) -> Result<DatasetManifest> {
    let d = &config.dataset;
    let n = d.train_scenes + d.val_scenes + d.test_scenes;
    let path = config.data_manifest_path();
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest = generate_dataset(n, &config.scene, config.stage_seed(Stage::Data), &dir)?;
    let manifest = split_dataset(
        &manifest,
        d.val_scenes as f64 / n as f64,
        d.test_scenes as f64 / n as f64,
        config.stage_seed(Stage::Data),
    )?;
    save_manifest(&manifest, &path)?;
    Ok(manifest)
}

pub fn augment(config: &PipelineConfig) -> Result<DatasetManifest> {
    let manifest = load_manifest(&config.data_manifest_path())?;
    let out = config.augmented_manifest_path();
    let dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let augmented = balance_augment(&manifest, config.stage_seed(Stage::Augment), &dir)?;
    save_manifest(&augmented, &out)?;
    Ok(augmented)
}

fn training_manifest(config: &PipelineConfig) -> Result<DatasetManifest> {
    Ok(load_manifest(&config.training_manifest_path())?)
}

pub fn train_detector_stage(config: &PipelineConfig) -> Result<DetectorModel> {
    let manifest = training_manifest(config)?;
    let model = train_detector(&manifest, &config.detector, config.stage_seed(Stage::Detector))?;
    model.save(&config.checkpoint("detector"))?;
    Ok(model)
}

pub fn train_classifier_stage(config: &PipelineConfig) -> Result<ClassifierModel> {
    let manifest = training_manifest(config)?;
    let seed = config.stage_seed(Stage::Classifier);
    let crops = &config.classifier.crops;
    let train = classifier_crops(&manifest, &manifest.records_in(SplitTag::Train), crops, seed)?;
    let no_jitter = crate::config::CropConfig {
        jitter_copies: 0,
        jitter: 0.0,
    };
    let val = classifier_crops(&manifest, &manifest.records_in(SplitTag::Val), &no_jitter, seed)?;
    let model = train_classifier(&manifest.label_set, &train, &val, &config.classifier.hyper, seed)?;
    model.save(&config.checkpoint("classifier"))?;
    Ok(model)
}

pub fn train_gan_stage(config: &PipelineConfig) -> Result<GeneratorModel> {
    let manifest = training_manifest(config)?;
    let train = gan_samples(&manifest, manifest.records_in(SplitTag::Train))?;
    let val = gan_samples(&manifest, manifest.records_in(SplitTag::Val))?;
    let model = train_energy_gan(&train, &val, &config.gan, config.stage_seed(Stage::Gan))?;
    model.save(&config.checkpoint("energy_gan"))?;
    Ok(model)
}

/// Trains the four-channel regressor and every configured ablation on the
/// same samples with the same seed.
pub fn train_regressor_stage(config: &PipelineConfig) -> Result<Vec<RegressorModel>> {
    let manifest = training_manifest(config)?;
    let stage = &config.regressor;
    let generator = match stage.maps {
        crate::config::MapSource::Generated => Some(GeneratorModel::load(&config.checkpoint("energy_gan"))?),
        crate::config::MapSource::Groundtruth => None,
    };
    let provider = MapProvider::new(stage.maps, generator.as_ref())?;
    let map_max = generator.as_ref().map_or(config.scene.max_density_units() as f64, |g| g.map_norm());
    let seed = config.stage_seed(Stage::Regressor);
    let train = portion_samples(&manifest, &manifest.records_in(SplitTag::Train), &provider, map_max, &stage.crops, seed)?;
    let no_jitter = crate::config::CropConfig {
        jitter_copies: 0,
        jitter: 0.0,
    };
    let val = portion_samples(&manifest, &manifest.records_in(SplitTag::Val), &provider, map_max, &no_jitter, seed)?;
    let mut masks = vec![ChannelMask::RgbDistribution];
    masks.extend(stage.ablations.iter().copied().filter(|m| *m != ChannelMask::RgbDistribution));
    let mut models = Vec::new();
    for mask in masks {
        let hyper = RegressorHyper {
            channels: mask,
            ..stage.hyper.clone()
        };
        let model = train_regressor(&train, &val, &hyper, seed)?;
        model.save(&config.regressor_checkpoint(mask))?;
        models.push(model);
    }
    Ok(models)
}

pub fn predictions_path(config: &PipelineConfig) -> PathBuf {
    config.paths.out_dir.join("predictions.json")
}

pub fn eval_report_path(config: &PipelineConfig) -> PathBuf {
    config.paths.out_dir.join("eval_report.json")
}

fn groundtruth_of(manifest: &DatasetManifest) -> BTreeMap<String, Vec<FoodAnnotation>> {
    manifest
        .records
        .iter()
        .map(|r| (r.image_id.clone(), r.annotations.clone()))
        .collect()
}

/// End-to-end inference over the evaluation split: predictions, annotated
/// images and the evaluation report.
pub fn infer(config: &PipelineConfig) -> Result<(Vec<OccasionResult>, EvalReport)> {
    let manifest = load_manifest(&config.data_manifest_path())?;
    let models = Models::load(config)?;
    let font = load_font(config.paths.font.as_deref()).ok();
    if font.is_none() {
        log::warn!("no usable font found; annotated images carry boxes without labels");
    }
    let records = manifest.records_in(config.eval.split);
    let mut results = Vec::with_capacity(records.len());
    for rec in records {
        let image = manifest.load_image(rec)?;
        let result = run_end_to_end(&models, &rec.image_id, &image, Some(&rec.annotations), config.eval.portion_match_iou)?;
        let annotated = render_annotated(&image, &result, font.as_ref(), config.eval.render_scale);
        let name = format!("{}.png", sanitize(&rec.image_id));
        save_rgb(&annotated, &config.paths.out_dir.join("annotated").join(name))?;
        results.push(result);
    }
    write_json(&predictions_path(config), &results)?;
    let report = build_eval_report(&config.hash(), &results, &groundtruth_of(&manifest), &config.eval.iou_thresholds)?;
    write_text(&eval_report_path(config), &report.to_json())?;
    Ok((results, report))
}

/// Recomputes the report from a previous `infer` run's predictions.
pub fn evaluate(config: &PipelineConfig) -> Result<EvalReport> {
    let manifest = load_manifest(&config.data_manifest_path())?;
    let results: Vec<OccasionResult> = read_json(&predictions_path(config))?;
    let report = build_eval_report(&config.hash(), &results, &groundtruth_of(&manifest), &config.eval.iou_thresholds)?;
    write_text(&eval_report_path(config), &report.to_json())?;
    write_text(&config.paths.out_dir.join("eval_report.txt"), &report.to_text())?;
    Ok(report)
}

/// Scatter of predicted against groundtruth occasion totals, one series per method.
pub fn plot(config: &PipelineConfig) -> Result<PathBuf> {
    let report: EvalReport = read_json(&eval_report_path(config))?;
    let series: Vec<ScatterSeries> = report
        .methods
        .iter()
        .map(|m| ScatterSeries {
            name: m.name.clone(),
            points: m.occasion_pairs.iter().map(|p| (p.gt_total, p.pred_total)).collect(),
        })
        .collect();
    let path = config.paths.out_dir.join("scatter.png");
    let font = load_font(config.paths.font.as_deref())?;
    plot_scatter(&series, &font, &path)?;
    Ok(path)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}
