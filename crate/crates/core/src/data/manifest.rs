//! `root/<split>/{partial,complete}/<stem>.ply` datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cloud::resample_ids;
use super::normalize::Transform;
use super::ply::read_ply;
use super::{DataError, PointCloud};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub name: String,
    pub partial: PathBuf,
    pub complete: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub records: Vec<ManifestRecord>,
    pub partial_count: usize,
    pub complete_count: usize,
}

/// One normalized pair. Both sides share the transform fitted to their
/// union; `labels` come from the complete file's `class` property.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub partial: PointCloud,
    pub complete: PointCloud,
    pub labels: Option<Vec<usize>>,
    pub transform: Transform,
    pub resampled: bool,
}

fn ply_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>, DataError> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for entry in entries {
        let path = entry
            .map_err(|source| DataError::Io {
                path: dir.display().to_string(),
                source,
            })?
            .path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

pub fn load_manifest(
    root: impl AsRef<Path>,
    split: &str,
    partial_count: usize,
    complete_count: usize,
) -> Result<DatasetManifest, DataError> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(DataError::Io {
            path: root.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        });
    }
    if partial_count == 0 || complete_count == 0 {
        return Err(DataError::Contract("manifest point counts must be positive".into()));
    }
    let base = root.join(split);
    let partials = ply_stems(&base.join("partial"))?;
    let mut completes = ply_stems(&base.join("complete"))?;
    let mut records = Vec::with_capacity(partials.len());
    for (name, partial) in partials {
        let Some(complete) = completes.remove(&name) else {
            return Err(DataError::Manifest(format!(
                "orphan partial file {} has no complete counterpart",
                partial.display()
            )));
        };
        records.push(ManifestRecord {
            name,
            partial,
            complete,
        });
    }
    if let Some(orphan) = completes.values().next() {
        return Err(DataError::Manifest(format!(
            "orphan complete file {} has no partial counterpart",
            orphan.display()
        )));
    }
    Ok(DatasetManifest {
        split: split.to_string(),
        records,
        partial_count,
        complete_count,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Loads record `index`; resampling draws from a stream keyed by
    /// `(seed, index)` so results do not depend on visiting order.
    pub fn load(&self, index: usize, seed: u64) -> Result<Sample, DataError> {
        let record = &self.records[index];
        let partial = read_ply(&record.partial)?;
        let complete = read_ply(&record.complete)?;
        if partial.cloud.is_empty() || complete.cloud.is_empty() {
            return Err(DataError::Contract(format!("sample '{}' has an empty cloud", record.name)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let (p_ids, p_changed) = resample_ids(partial.cloud.len(), self.partial_count, &mut rng);
        let (c_ids, c_changed) = resample_ids(complete.cloud.len(), self.complete_count, &mut rng);
        let union = PointCloud::new([&partial.cloud.points[..], &complete.cloud.points[..]].concat());
        let transform = Transform::fit(&union)?;
        Ok(Sample {
            name: record.name.clone(),
            partial: transform.apply(&partial.cloud.select(&p_ids)),
            complete: transform.apply(&complete.cloud.select(&c_ids)),
            labels: complete.labels.map(|l| c_ids.iter().map(|&i| l[i]).collect()),
            transform,
            resampled: p_changed || c_changed,
        })
    }

    pub fn samples(&self, seed: u64) -> impl Iterator<Item = Result<Sample, DataError>> + '_ {
        (0..self.records.len()).map(move |i| self.load(i, seed))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
