//! Named-array container: magic, manifest length, manifest digest, JSON
//! manifest, then little-endian payloads.

use std::collections::BTreeMap;
use std::path::Path;

use coevo_autodiff::Array;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, Dtype};
use crate::error::{CoevoError, Result};

const MAGIC: &[u8; 8] = b"COEVOCK1";
const HEADER_LEN: usize = 8 + 8 + 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub step: u64,
    pub arrays: Vec<ManifestEntry>,
    pub payload_len: u64,
    pub payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub arrays: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>, step: u64) -> Self {
        Checkpoint {
            config_hash: config_hash.into(),
            step,
            arrays: BTreeMap::new(),
        }
    }

    /// Inserts every array of `bundle` under `prefix/`.
    pub fn insert_bundle(&mut self, prefix: &str, bundle: &crate::params::ParamBundle) {
        for (k, v) in bundle.iter() {
            self.arrays.insert(format!("{prefix}/{k}"), v.clone());
        }
    }

    /// The arrays stored under `prefix/`, with the prefix stripped.
    pub fn bundle(&self, prefix: &str) -> Result<crate::params::ParamBundle> {
        let start = format!("{prefix}/");
        let b: crate::params::ParamBundle = self
            .arrays
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&start).map(|s| (s.to_string(), v.clone())))
            .collect();
        if b.is_empty() {
            return Err(CoevoError::invalid(format!("checkpoint has no `{prefix}` arrays")));
        }
        Ok(b)
    }

    pub fn has_bundle(&self, prefix: &str) -> bool {
        let start = format!("{prefix}/");
        self.arrays.keys().any(|k| k.starts_with(&start))
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, a) in &self.arrays {
            let offset = payload.len() as u64;
            match dtype {
                Dtype::F64 => a.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
                Dtype::F32 => a
                    .data()
                    .iter()
                    .for_each(|v| payload.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
                dtype,
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            config_hash: self.config_hash.clone(),
            step: self.step,
            arrays: entries,
            payload_len: payload.len() as u64,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let m = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + m.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&m));
        out.extend_from_slice(&m);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let fail = |message: String| CoevoError::Checkpoint {
            path: origin.to_path_buf(),
            message,
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(fail("missing container header".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[HEADER_LEN..];
        if mlen > body.len() {
            return Err(fail(format!("manifest length {mlen} exceeds file")));
        }
        let m = &body[..mlen];
        if Sha256::digest(m).as_slice() != &bytes[16..48] {
            return Err(fail("manifest digest mismatch".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(m).map_err(|e| fail(format!("manifest parse: {e}")))?;
        let payload = &body[mlen..];
        if payload.len() as u64 != manifest.payload_len {
            return Err(fail(format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_len
            )));
        }
        if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(fail("payload digest mismatch".into()));
        }
        let mut arrays = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in &manifest.arrays {
            let width = match e.dtype {
                Dtype::F32 => 4,
                Dtype::F64 => 8,
            };
            let count: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.nbytes != (count * width) as u64 {
                return Err(fail(format!("inconsistent offsets for `{}`", e.name)));
            }
            expected_offset += e.nbytes;
            if expected_offset > manifest.payload_len {
                return Err(fail(format!("`{}` runs past the payload", e.name)));
            }
            let raw = &payload[e.offset as usize..expected_offset as usize];
            let data: Vec<f64> = match e.dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            let a = Array::new(e.shape.clone(), data).map_err(|err| fail(err.to_string()))?;
            arrays.insert(e.name.clone(), a);
        }
        if expected_offset != manifest.payload_len {
            return Err(fail("payload has trailing bytes".into()));
        }
        Ok(Checkpoint {
            config_hash: manifest.config_hash,
            step: manifest.step,
            arrays,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path, dtype: Dtype) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CoevoError::io(dir, e))?;
    }
    std::fs::write(path, checkpoint.to_bytes(dtype)).map_err(|e| CoevoError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CoevoError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Reads just the manifest, for inspection.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| CoevoError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)?;
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    Ok(serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + mlen])?)
}
