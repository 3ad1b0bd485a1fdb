// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk artifacts: a JSON header followed by a little-endian `f32` blob.
//!
//! Layout: the magic `VDART1\n`, the header length as a little-endian `u64`,
//! the header JSON, then the blob. The header records every array's name,
//! shape and offset, the SHA-256 of the blob, and the hash of the config
//! that produced the artifact. Only the creation time differs between two
//! runs of the same command.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"VDART1\n";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn f32_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A named float array inside an artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Array {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config_hash: String,
    created_unix: u64,
    blob_sha256: String,
    arrays: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

/// In-memory artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub kind: String,
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<Array>,
}

impl Artifact {
    pub fn new(kind: impl Into<String>, config_hash: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            config_hash: config_hash.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, array: Array) {
        self.arrays.push(array);
    }

    pub fn array(&self, name: &str) -> Result<&Array> {
        self.arrays.iter().find(|a| a.name == name).ok_or_else(|| Error::Invalid(format!("artifact has no array {name:?}")))
    }

    /// The numeric payload: every array blob in order.
    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for a in &self.arrays {
            out.extend(f32_to_le(&a.data));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0;
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::shape("artifact array", &[&a.shape, &[a.data.len()]]));
            }
            entries.push(ArrayEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                offset,
                len: a.data.len(),
            });
            offset += a.data.len() * 4;
        }
        let blob = self.blob();
        let header = Header {
            kind: self.kind.clone(),
            config_hash: self.config_hash.clone(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            blob_sha256: sha256_hex(&blob),
            arrays: entries,
            meta: self.meta.clone(),
        };
        let head = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + head.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Artifact {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not an artifact file"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let hlen = u64::from_le_bytes(len) as usize;
        let start = MAGIC.len() + 8;
        if bytes.len() < start + hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[start..start + hlen])
            .map_err(|e| bad(&format!("header: {e}")))?;
        let blob = &bytes[start + hlen..];
        if sha256_hex(blob) != header.blob_sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let end = e.offset + e.len * 4;
            if end > blob.len() || e.shape.iter().product::<usize>() != e.len {
                return Err(bad(&format!("array {:?} out of bounds", e.name)));
            }
            arrays.push(Array {
                name: e.name,
                shape: e.shape,
                data: f32_from_le(&blob[e.offset..end]),
            });
        }
        Ok(Self {
            kind: header.kind,
            config_hash: header.config_hash,
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// Loads an artifact and checks its kind.
    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let a = Self::from_bytes(&bytes, path)?;
        if a.kind != kind {
            return Err(Error::Artifact {
                path: path.to_path_buf(),
                reason: format!("expected a {kind} artifact, found {}", a.kind),
            });
        }
        Ok(a)
    }
}
