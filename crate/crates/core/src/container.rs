//! Versioned binary container shared by checkpoints and packed datasets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes
//! version     u32
//! header_len  u64
//! header      JSON: {"meta": …, "tensors": [{"name", "shape", "offset"}, …]}
//! payload     f64 values, tensors back to back; offsets count bytes from
//!             the payload start
//! checksum    SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use saits_tensor::Tensor;

use crate::error::{Result, SaitsError};

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SAITSCKP";
pub const DATASET_MAGIC: [u8; 8] = *b"SAITSDAT";

const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<ManifestEntry>,
}

/// Decoded container contents, tensors in file order.
#[derive(Clone, Debug)]
pub struct Container {
    pub meta: Value,
    pub manifest: Vec<ManifestEntry>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| SaitsError::Manifest(format!("missing tensor `{name}`")))?;
        Ok(self.tensors.remove(pos).1)
    }

    pub fn take_optional(&mut self, name: &str) -> Option<Tensor> {
        let pos = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(pos).1)
    }
}

pub fn encode(magic: [u8; 8], meta: Value, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let manifest = tensors
        .iter()
        .map(|(name, t)| {
            let entry = ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.numel() as u64;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header { meta, tensors: manifest })?;

    let mut buf = Vec::with_capacity(20 + header.len() + offset as usize + CHECKSUM_LEN);
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Decode and verify a container. `origin` names the source in errors.
pub fn decode(magic: [u8; 8], bytes: &[u8], origin: &Path) -> Result<Container> {
    if bytes.len() < 20 + CHECKSUM_LEN {
        return Err(SaitsError::Container(format!("{} is truncated", origin.display())));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(SaitsError::Checksum(origin.to_path_buf()));
    }
    if body[..8] != magic {
        return Err(SaitsError::Container(format!(
            "{} has magic {:?}, expected {:?}",
            origin.display(),
            String::from_utf8_lossy(&body[..8]),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(SaitsError::Container(format!(
            "{} has format version {version}, this build reads {FORMAT_VERSION}",
            origin.display()
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let payload_start = 20usize
        .checked_add(header_len)
        .filter(|&end| end <= body.len())
        .ok_or_else(|| SaitsError::Container("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&body[20..payload_start])?;
    let payload = &body[payload_start..];

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * numel;
        if end > payload.len() {
            return Err(SaitsError::Container(format!(
                "tensor `{}` runs past the payload",
                entry.name
            )));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok(Container {
        meta: header.meta,
        manifest: header.tensors,
        tensors,
    })
}

pub fn write(path: &Path, magic: [u8; 8], meta: Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let bytes = encode(magic, meta, tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SaitsError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| SaitsError::io(path, e))
}

pub fn read(path: &Path, magic: [u8; 8]) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| SaitsError::io(path, e))?;
    decode(magic, &bytes, path)
}
