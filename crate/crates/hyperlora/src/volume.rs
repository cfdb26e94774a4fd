//! `HCTV` volume files: magic, version byte, `H`, `W`, `Z` as little-endian
//! `u32`, then `H·W·Z` little-endian `f32` voxels ordered slice by slice,
//! each slice row-major.

use std::path::Path;

use hyperlora_core::Tensor;

use crate::error::{self, AppError, AppResult, FormatError};

pub const MAGIC: &[u8; 4] = b"HCTV";
pub const VERSION: u8 = 1;
const HEADER: usize = 4 + 1 + 12;

/// Serializes an `H×W×Z` tensor (stored with `Z` fastest).
pub fn encode(volume: &Tensor) -> Result<Vec<u8>, FormatError> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(FormatError::Manifest(format!("volume must be 3-D, got shape {s:?}")));
    }
    let (h, w, z) = (s[0], s[1], s[2]);
    let dims: Vec<u64> = s.iter().map(|&d| d as u64).collect();
    if dims.iter().any(|&d| d > u32::MAX as u64) {
        return Err(FormatError::DimOverflow(dims));
    }
    let mut out = Vec::with_capacity(HEADER + 4 * volume.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for d in [h, w, z] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let data = volume.data();
    for k in 0..z {
        for px in 0..h * w {
            out.extend_from_slice(&data[px * z + k].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
            expected: MAGIC,
        });
    }
    if bytes.len() < HEADER {
        return Err(FormatError::Truncated {
            what: "volume header",
            expected: HEADER as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes[4] != VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as u64;
    let dims = vec![dim(0), dim(1), dim(2)];
    let payload = dims
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= (usize::MAX / 2) as u64)
        .ok_or_else(|| FormatError::DimOverflow(dims.clone()))?;
    let found = (bytes.len() - HEADER) as u64;
    if found < payload {
        return Err(FormatError::Truncated {
            what: "volume payload",
            expected: payload,
            found,
        });
    }
    if found > payload {
        return Err(FormatError::TrailingBytes(found - payload));
    }
    let (h, w, z) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let body = &bytes[HEADER..];
    let mut data = vec![0f32; h * w * z];
    for k in 0..z {
        for px in 0..h * w {
            let at = 4 * (k * h * w + px);
            data[px * z + k] = f32::from_le_bytes(body[at..at + 4].try_into().unwrap());
        }
    }
    Tensor::new(vec![h, w, z], data).map_err(|e| FormatError::Manifest(e.to_string()))
}

pub fn save_volume(path: &Path, volume: &Tensor) -> AppResult<()> {
    let bytes = encode(volume).map_err(|e| AppError::format(path, e))?;
    error::write(path, bytes)
}

pub fn load_volume(path: &Path) -> AppResult<Tensor> {
    decode(&error::read(path)?).map_err(|e| AppError::format(path, e))
}
