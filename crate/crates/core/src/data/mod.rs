//! Point-cloud types, PLY files, normalization, synthetic pairs and
//! on-disk datasets.

mod cloud;
pub mod manifest;
pub mod normalize;
pub mod ply;
pub mod synthetic;

use thiserror::Error;

pub use cloud::{resample_ids, LabeledCloud, PointCloud};
pub use manifest::{load_manifest, DatasetManifest, ManifestRecord, Sample};
pub use normalize::{denormalize, normalize, Transform};
pub use ply::{read_ply, write_ply, PlyCloud, PlyError, PlyFormat};
pub use synthetic::{generate_synthetic, ShapeFamily, SyntheticPair, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}
