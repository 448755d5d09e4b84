//! Configuration, checkpoints, stage orchestration and result export.

mod artifacts;
mod checkpoint;
mod config;
pub mod report;
mod stages;

pub use artifacts::*;
pub use checkpoint::{ArrayEntry, Checkpoint, Manifest, SCHEMA_VERSION};
pub use config::{ExperimentConfig, FinetuneConfig, LandscapeConfig, ReferencePreset, Stage, OUTPUT_ROOT_ENV};
pub use stages::{load_tasks, pet_stem, run_all, run_stage, DirLock, Runner, TransferRecord};
