//! End-to-end dietary assessment: detect food regions, classify each crop,
//! generate an energy-distribution map for the image, crop it per box, fuse
//! it with the RGB crop and regress the portion in kcal. Every stage can be
//! run on its own from one JSON config.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod plot;
pub mod render;
pub mod stages;

pub use config::PipelineConfig;
pub use error::{PipelineError, Result};
pub use pipeline::{run_end_to_end, Models, OccasionItem, OccasionResult};
