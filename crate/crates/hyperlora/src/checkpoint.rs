//! Checkpoint container: version byte, little-endian `u32` manifest length,
//! JSON manifest, then every parameter as little-endian `f32` in manifest
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use hyperlora_core::params::ParamStore;
use hyperlora_core::rng::RngState;
use hyperlora_core::Tensor;

use crate::config::RunConfig;
use crate::error::{self, AppError, AppResult, FormatError};

pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamRecord {
    path: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: RunConfig,
    num_tasks: usize,
    epoch: usize,
    rng: RngState,
    params: Vec<ParamRecord>,
}

/// Trainable parameters of a model plus everything needed to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub config: RunConfig,
    pub num_tasks: usize,
    pub epoch: usize,
    pub rng: RngState,
    pub params: ParamStore<f32>,
}

impl CheckpointFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let mut records = Vec::with_capacity(self.params.len());
        for (path, e) in self.params.iter() {
            records.push(ParamRecord {
                path: path.to_string(),
                shape: e.tensor.shape().to_vec(),
                offset,
            });
            offset += 4 * e.tensor.numel() as u64;
        }
        let manifest = Manifest {
            config: self.config.clone(),
            num_tasks: self.num_tasks,
            epoch: self.epoch,
            rng: self.rng,
            params: records,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(5 + json.len() + offset as usize);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, e) in self.params.iter() {
            out.extend_from_slice(&e.tensor.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.is_empty() {
            return Err(FormatError::Truncated {
                what: "checkpoint header",
                expected: 5,
                found: 0,
            });
        }
        if bytes[0] != VERSION {
            return Err(FormatError::UnsupportedVersion(bytes[0]));
        }
        if bytes.len() < 5 {
            return Err(FormatError::Truncated {
                what: "checkpoint header",
                expected: 5,
                found: bytes.len() as u64,
            });
        }
        let len = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
        let rest = &bytes[5..];
        if rest.len() < len {
            return Err(FormatError::Truncated {
                what: "checkpoint manifest",
                expected: len as u64,
                found: rest.len() as u64,
            });
        }
        let mut manifest: Manifest =
            serde_json::from_slice(&rest[..len]).map_err(|e| FormatError::Manifest(e.to_string()))?;
        manifest.config.resolve();
        let data = &rest[len..];
        let mut params = ParamStore::new();
        let mut expected = 0u64;
        for r in &manifest.params {
            if r.offset != expected {
                return Err(FormatError::Manifest(format!(
                    "parameter `{}` at offset {} but previous data ends at {expected}",
                    r.path, r.offset
                )));
            }
            let numel = r
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| FormatError::DimOverflow(r.shape.iter().map(|&d| d as u64).collect()))?;
            let end = expected
                .checked_add(numel)
                .ok_or_else(|| FormatError::DimOverflow(r.shape.iter().map(|&d| d as u64).collect()))?;
            if end > data.len() as u64 {
                return Err(FormatError::Truncated {
                    what: "checkpoint parameter data",
                    expected: end,
                    found: data.len() as u64,
                });
            }
            let t = Tensor::<f32>::from_le_bytes(&r.shape, &data[expected as usize..end as usize])
                .map_err(|e| FormatError::Manifest(e.to_string()))?;
            params
                .insert(r.path.clone(), t, true)
                .map_err(|e| FormatError::Manifest(e.to_string()))?;
            expected = end;
        }
        if (data.len() as u64) > expected {
            return Err(FormatError::TrailingBytes(data.len() as u64 - expected));
        }
        Ok(CheckpointFile {
            config: manifest.config,
            num_tasks: manifest.num_tasks,
            epoch: manifest.epoch,
            rng: manifest.rng,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        error::write(path, self.encode())
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        Self::decode(&error::read(path)?).map_err(|e| AppError::format(path, e))
    }
}
