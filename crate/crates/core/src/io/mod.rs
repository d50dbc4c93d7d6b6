//! File formats and dataset ingestion.

pub mod container;
pub mod formats;
pub mod manifest;

pub use container::{load_checkpoint, load_model, save_checkpoint, save_model};
pub use formats::write_atomic;
pub use manifest::{load_dataset, save_dataset, CameraJson, Dataset, Manifest};
