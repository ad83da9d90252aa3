//! Architecture configs, model construction, parameter accounting and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod model;

pub use checkpoint::{load, save};
pub use config::{
    halve_channels, reference_total, LayerPlan, ModelConfig, NUM_CLASSES, REFERENCE_TOTALS,
};
pub use model::{model_size, LayerSummary, Model, ModelSize};
