//! Semi-supervised glomeruli segmentation toolkit.

pub mod augment;
pub mod catalog;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fixture;
pub mod mask;
pub mod models;
pub mod rng;
pub mod ssl;

pub use catalog::{DatasetId, DatasetManifest, ManifestRole, PatchRecord};
pub use error::{Error, Result};
pub use mask::SegMask;
