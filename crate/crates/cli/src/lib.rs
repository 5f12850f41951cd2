//! Command-line front end for the distribution-distillation lab: dataset
//! synthesis, training, evaluation and ablation tables.

pub mod commands;
pub mod config;
pub mod manifest;

pub use config::RunConfig;
pub use manifest::RunManifest;
