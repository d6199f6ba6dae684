//! Artifact plumbing and training orchestration: config files, dataset
//! ingestion, checkpoints, token caches, and the stage drivers the CLI
//! calls into.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod tokens;
pub mod train;

pub use checkpoint::{file_fingerprint, Checkpoint};
pub use config::{DatasetFormat, LrSchedule, RunConfig, Stage};
pub use data::{load_dataset, save_image_directory, save_packed, Dataset};
pub use tokens::TokenDataset;
