//! Core data model and pure operations for end-to-end food image analysis:
//! localization boxes, eating-occasion manifests, synthetic scenes,
//! geometric augmentation, energy maps, RGB-Distribution fusion and the
//! evaluation metrics.

pub mod augment;
pub mod bbox;
pub mod dataset;
pub mod detection;
pub mod energy;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod raster;
pub mod report;
pub mod synth;

pub use augment::{augment_record, balance_augment, transform_bbox, AugmentOp, LoadedRecord};
pub use bbox::BoundingBox;
pub use dataset::{
    load_manifest, save_manifest, split_dataset, DatasetManifest, EatingOccasionRecord, FoodAnnotation, SplitTag,
};
pub use detection::{nms, Detection};
pub use energy::{crop_energy_map, integrate_energy, EnergyMap};
pub use error::{Error, Result};
pub use fusion::{fuse_rgbd, l1_loss, RgbDistributionImage};
pub use raster::crop_region;
pub use report::EvalReport;
pub use synth::{generate_dataset, generate_scene, SceneConfig, SyntheticScene};
