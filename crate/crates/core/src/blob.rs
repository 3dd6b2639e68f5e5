//! Raw little-endian float blobs with content hashes, and manifest text I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// On-disk element type of a blob; values are always 64-bit in memory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn encode(data: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(data.len() * dtype.width());
    for &v in data {
        match dtype {
            Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    bytes
}

pub(crate) fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect(),
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `data` and returns the hash of the written bytes.
pub(crate) fn write_blob(path: &Path, data: &[f64], dtype: Dtype) -> Result<String> {
    let bytes = encode(data, dtype);
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Reads exactly `len` values, verifying the size and, when given, the hash.
pub(crate) fn read_blob(path: &Path, len: usize, dtype: Dtype, sha256: Option<&str>) -> Result<Vec<f64>> {
    let bytes = read_bytes(path)?;
    let want = len * dtype.width();
    if bytes.len() != want {
        return Err(Error::corrupt(
            path,
            format!("expected {want} bytes, found {}", bytes.len()),
        ));
    }
    if let Some(expected) = sha256 {
        let got = sha256_hex(&bytes);
        if got != expected {
            return Err(Error::corrupt(path, format!("content hash {got} != recorded {expected}")));
        }
    }
    Ok(decode(&bytes, dtype))
}

pub(crate) fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_bitwise() {
        let data = [0.1, -3.5e-300, f64::MAX, 1.0 / 3.0];
        assert_eq!(decode(&encode(&data, Dtype::F64), Dtype::F64), data);
    }

    #[test]
    fn f32_mode_rounds() {
        let data = [1.0 / 3.0];
        let back = decode(&encode(&data, Dtype::F32), Dtype::F32);
        assert_eq!(back[0], f64::from(1.0f32 / 3.0));
    }
}
