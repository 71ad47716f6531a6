//! Tensor checkpoint files.
//!
//! Layout: the 8-byte magic `FDSRCKPT`, a little-endian `u64` manifest
//! length, the UTF-8 JSON manifest, then every tensor's raw little-endian
//! values back to back in manifest order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Precision, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FDSRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    tensors: Vec<TensorEntry>,
}

/// Named tensors as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<R: Real> {
    pub tensors: Vec<(String, Tensor<R>)>,
}

impl<R: Real> Checkpoint<R> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    precision: R::PRECISION,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                detail: "truncated checkpoint header".into(),
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad checkpoint magic".into(),
            });
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Format {
                offset: 8,
                detail: format!("manifest length {mlen} exceeds file size"),
            })?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Format {
            offset: 16,
            detail: format!("manifest: {e}"),
        })?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "checkpoint",
                found: manifest.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut offset = body;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            if entry.precision != R::PRECISION {
                return Err(Error::Format {
                    offset: offset as u64,
                    detail: format!(
                        "tensor {} stored as {} but {} requested",
                        entry.name,
                        entry.precision.as_str(),
                        R::PRECISION.as_str()
                    ),
                });
            }
            let numel: usize = entry.shape.iter().product();
            let width = R::PRECISION.byte_width();
            let end = offset + numel * width;
            if end > bytes.len() {
                return Err(Error::Format {
                    offset: bytes.len() as u64,
                    detail: format!("truncated data for tensor {}", entry.name),
                });
            }
            let data = bytes[offset..end].chunks_exact(width).map(R::read_le).collect();
            let t = Tensor::new(&entry.shape, data).map_err(|e| Error::Format {
                offset: offset as u64,
                detail: e.to_string(),
            })?;
            tensors.push((entry.name, t));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::Format {
                offset: offset as u64,
                detail: format!("{} trailing bytes", bytes.len() - offset),
            });
        }
        Ok(Self { tensors })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_checkpoint<R: Real>(mut w: impl Write, ckpt: &Checkpoint<R>) -> Result<()> {
    w.write_all(&ckpt.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint<R: Real>(mut r: impl Read) -> Result<Checkpoint<R>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}
