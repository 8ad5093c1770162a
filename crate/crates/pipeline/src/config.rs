//! The single JSON file that drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use foodlens_core::metrics::coco_thresholds;
use foodlens_core::{SceneConfig, SplitTag};
use foodlens_models::classifier::ClassifierHyper;
use foodlens_models::detector::DetectorHyper;
use foodlens_models::gan::GanHyper;
use foodlens_models::regressor::{ChannelMask, RegressorHyper};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Root for every artifact a run writes.
    pub out_dir: PathBuf,
    /// Dataset manifest; defaults to the synthetic one under `out_dir`.
    pub manifest: Option<PathBuf>,
    /// Checkpoint directory; defaults to `out_dir/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
    /// TrueType font for labels and plots; common system locations are tried when unset.
    pub font: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            manifest: None,
            checkpoint_dir: None,
            font: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Train stages read the frequency-balanced augmented manifest.
    pub use_augmented: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            val_scenes: 30,
            test_scenes: 0,
            use_augmented: false,
        }
    }
}

/// Where the regressor's distribution channel comes from during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    /// Maps produced by the trained generator, as at inference time.
    Generated,
    Groundtruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    /// Extra randomly perturbed copies of every groundtruth box.
    pub jitter_copies: usize,
    /// Largest edge shift as a fraction of the box side.
    pub jitter: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            jitter_copies: 2,
            jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierStage {
    #[serde(flatten)]
    pub hyper: ClassifierHyper,
    pub crops: CropConfig,
}

impl Default for ClassifierStage {
    fn default() -> Self {
        Self {
            hyper: ClassifierHyper::default(),
            crops: CropConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorStage {
    #[serde(flatten)]
    pub hyper: RegressorHyper,
    pub crops: CropConfig,
    pub maps: MapSource,
    /// Channel-masked variants trained alongside the main regressor.
    pub ablations: Vec<ChannelMask>,
}

impl Default for RegressorStage {
    fn default() -> Self {
        Self {
            hyper: RegressorHyper::default(),
            crops: CropConfig {
                jitter_copies: 1,
                jitter: 0.05,
            },
            maps: MapSource::Generated,
            ablations: vec![ChannelMask::DistributionOnly, ChannelMask::RgbOnly],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub split: SplitTag,
    /// IoU above which a detection is paired with a groundtruth item for portion errors.
    pub portion_match_iou: f64,
    /// Pixel magnification of annotated images.
    pub render_scale: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_thresholds(),
            split: SplitTag::Val,
            portion_match_iou: 0.5,
            render_scale: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Every stage seed is derived from this one.
    pub seed: u64,
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub scene: SceneConfig,
    pub detector: DetectorHyper,
    pub classifier: ClassifierStage,
    pub gan: GanHyper,
    pub regressor: RegressorStage,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: Paths::default(),
            dataset: DatasetConfig::default(),
            scene: SceneConfig::default(),
            detector: DetectorHyper::default(),
            classifier: ClassifierStage::default(),
            gan: GanHyper::default(),
            regressor: RegressorStage::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Stage whose seed is derived from the base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Augment,
    Detector,
    Classifier,
    Gan,
    Regressor,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_text(path, &self.to_json())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.dataset.train_scenes == 0 {
            return Err(PipelineError::Config("dataset.train_scenes must be positive".into()));
        }
        if self.eval.iou_thresholds.is_empty() || self.eval.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(PipelineError::Config("eval.iou_thresholds must be nonempty values in (0, 1]".into()));
        }
        if self.eval.render_scale == 0 {
            return Err(PipelineError::Config("eval.render_scale must be positive".into()));
        }
        self.detector.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.gan.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let offset = match stage {
            Stage::Data => 0,
            Stage::Augment => 1,
            Stage::Detector => 2,
            Stage::Classifier => 3,
            Stage::Gan => 4,
            Stage::Regressor => 5,
        };
        self.seed.wrapping_mul(1000).wrapping_add(offset)
    }

    pub fn data_manifest_path(&self) -> PathBuf {
        self.paths
            .manifest
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("data").join("manifest.json"))
    }

    pub fn augmented_manifest_path(&self) -> PathBuf {
        self.paths.out_dir.join("augmented").join("manifest.json")
    }

    /// Manifest read by the training stages.
    pub fn training_manifest_path(&self) -> PathBuf {
        if self.dataset.use_augmented {
            self.augmented_manifest_path()
        } else {
            self.data_manifest_path()
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("checkpoints"))
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoint_dir().join(format!("{name}.safetensors"))
    }

    pub fn regressor_checkpoint(&self, mask: ChannelMask) -> PathBuf {
        match mask {
            ChannelMask::RgbDistribution => self.checkpoint("regressor"),
            other => self.checkpoint(&format!("regressor_{}", other.name())),
        }
    }
}
