//! Binary checkpoints.
//!
//! ```text
//! magic    8 bytes  "DSPNCKPT"
//! version  u32 LE
//! hlen     u64 LE
//! header   hlen bytes of JSON (config echo, shapes, optimizer, RNG state)
//! payload  f64 LE: parameters, then first moments, then second moments
//! checksum 8 bytes, leading bytes of SHA-256 over everything above
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Adam, AdamConfig, ArchitectureConfig, Model, ModelError};
use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 8] = b"DSPNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error(
        "checkpoint format version {found} is not supported by this build (expects {expected}); \
         re-export the model with a matching release"
    )]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("checkpoint integrity check failed: {0}")]
    Checksum(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Stored as a string; JSON numbers cannot hold a `u128`.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adam,
    pub iteration: u64,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ArchitectureConfig,
    shapes: Vec<Vec<usize>>,
    optimizer: AdamConfig,
    optimizer_step: u64,
    iteration: u64,
    rng: RngState,
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(bytes);
    digest[..8].try_into().expect("digest is 32 bytes")
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let params = self.model.parameters();
        let header = Header {
            config: self.model.config().clone(),
            shapes: params.iter().map(|t| t.shape().to_vec()).collect(),
            optimizer: self.optimizer.config,
            optimizer_step: self.optimizer.step,
            iteration: self.iteration,
            rng: self.rng,
        };
        let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in params.into_iter().chain(&self.optimizer.m).chain(&self.optimizer.v) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 {
            return Err(CheckpointError::Checksum(format!("file is only {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 28 {
            return Err(CheckpointError::Checksum("file is truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != tail {
            return Err(CheckpointError::Checksum(
                "stored checksum does not match contents (truncated or modified file)".into(),
            ));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| CheckpointError::Corrupt("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let mut model = Model::zeros(header.config)?;
        let expected: Vec<Vec<usize>> = model.parameters().iter().map(|t| t.shape().to_vec()).collect();
        if expected != header.shapes {
            return Err(CheckpointError::Corrupt(
                "parameter shapes do not match the stored architecture".into(),
            ));
        }
        let floats: usize = expected.iter().map(|s| s.iter().product::<usize>()).sum();
        let payload = &body[header_end..];
        if payload.len() != 3 * floats * 8 {
            return Err(CheckpointError::Corrupt(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                3 * floats * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut read = |shape: &[usize]| {
            let data: Vec<f64> = values.by_ref().take(shape.iter().product()).collect();
            Tensor::new(shape.to_vec(), data).expect("payload length checked")
        };
        for p in model.parameters_mut() {
            let t = read(p.shape());
            *p = t;
        }
        let m = expected.iter().map(|s| read(s)).collect();
        let v = expected.iter().map(|s| read(s)).collect();
        Ok(Self {
            model,
            optimizer: Adam {
                config: header.optimizer,
                step: header.optimizer_step,
                m,
                v,
            },
            iteration: header.iteration,
            rng: header.rng,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}
