//! Binary artifact format shared by every stage.
//!
//! Layout: the 8 magic bytes `TARDGR01`, a little-endian `u64` manifest
//! length, a TOML manifest, then the payload. The manifest lists every
//! array (name, shape, byte offset into the payload) and every opaque byte
//! section, plus string metadata. Arrays are little-endian `f32`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"TARDGR01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated file: need {needed} bytes at offset {offset}, have {available}")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("missing array `{0}`")]
    MissingArray(String),
    #[error("missing section `{0}`")]
    MissingSection(String),
    #[error("missing metadata key `{0}`")]
    MissingMeta(String),
    #[error("metadata `{key}`: {message}")]
    BadMeta { key: String, message: String },
    #[error("expected a `{expected}` checkpoint, found `{found}`")]
    Kind { expected: String, found: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    meta: BTreeMap<String, String>,
    #[serde(default)]
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    sections: Vec<SectionEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor)>,
    pub sections: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Self::default()
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn push_array(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn push_section(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.sections.push((name.into(), bytes));
    }

    pub fn array(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    pub fn section(&self, name: &str) -> Result<&[u8], CheckpointError> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError>
    where
        T::Err: std::fmt::Display,
    {
        self.meta_str(key)?.parse().map_err(|e: T::Err| CheckpointError::BadMeta {
            key: key.to_string(),
            message: e.to_string(),
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::Kind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut arrays = Vec::with_capacity(self.arrays.len());
        for (name, t) in &self.arrays {
            arrays.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut sections = Vec::with_capacity(self.sections.len());
        for (name, bytes) in &self.sections {
            sections.push(SectionEntry {
                name: name.clone(),
                offset: payload.len(),
                len: bytes.len(),
            });
            payload.extend_from_slice(bytes);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays,
            sections,
        };
        let text = toml::to_string(&manifest).expect("manifest is plain data");
        let mut out = Vec::with_capacity(16 + text.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let take = |offset: usize, needed: usize| -> Result<&[u8], CheckpointError> {
            bytes.get(offset..offset + needed).ok_or(CheckpointError::Truncated {
                offset,
                needed,
                available: bytes.len().saturating_sub(offset),
            })
        };
        if take(0, 8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len = u64::from_le_bytes(take(8, 8)?.try_into().expect("8 bytes")) as usize;
        let text = std::str::from_utf8(take(16, len)?).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let manifest: Manifest = toml::from_str(text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(manifest.format_version));
        }
        let base = 16 + len;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for a in manifest.arrays {
            let n: usize = a.shape.iter().product();
            let raw = take(base + a.offset, 4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.push((a.name, Tensor::new(a.shape, data)?));
        }
        let mut sections = Vec::with_capacity(manifest.sections.len());
        for s in manifest.sections {
            sections.push((s.name, take(base + s.offset, s.len)?.to_vec()));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            arrays,
            sections,
        })
    }

    /// Writes the checkpoint and returns the sha256 of the bytes written.
    pub fn write(&self, path: &Path) -> Result<String, CheckpointError> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

/// LEB128 unsigned varint.
pub fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub fn put_zigzag(out: &mut Vec<u8>, v: i64) {
    put_varint(out, ((v << 1) ^ (v >> 63)) as u64);
}

/// Cursor over varint-encoded bytes.
pub struct VarintReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> VarintReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn is_done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub fn varint(&mut self) -> Result<u64, CheckpointError> {
        let mut v: u64 = 0;
        let mut shift = 0;
        loop {
            let byte = *self.bytes.get(self.pos).ok_or(CheckpointError::Truncated {
                offset: self.pos,
                needed: 1,
                available: 0,
            })?;
            self.pos += 1;
            if shift >= 64 {
                return Err(CheckpointError::Manifest("varint overflow".into()));
            }
            v |= ((byte & 0x7f) as u64) << shift;
            if byte & 0x80 == 0 {
                return Ok(v);
            }
            shift += 7;
        }
    }

    pub fn zigzag(&mut self) -> Result<i64, CheckpointError> {
        let u = self.varint()?;
        Ok((u >> 1) as i64 ^ -((u & 1) as i64))
    }
}
