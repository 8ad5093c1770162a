//! Trainable networks for the food pipeline: a class-agnostic two-stage
//! detector, a crop classifier, a conditional-GAN energy-map generator and a
//! four-channel portion regressor.

pub mod classifier;
pub mod detector;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod regressor;
pub mod train;

pub use error::{ModelError, Result};
pub use train::{EpochLog, TrainLog};
