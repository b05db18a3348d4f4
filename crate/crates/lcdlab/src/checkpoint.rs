//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes   "PXDL"
//! version u32       1
//! hlen    u64       header byte length
//! header  hlen      JSON array of { name, shape, offset }, ordered;
//!                   offset is the f32-element offset into the payload
//! payload           concatenated f32 arrays, little-endian
//! crc     u32       CRC32 (IEEE) of the payload bytes
//! ```
//!
//! Two saves of identical parameters are byte-identical (no timestamps).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PXDL";
pub const VERSION: u32 = 1;

/// CRC32 (IEEE polynomial), used for checkpoint payloads, dataset blobs,
/// and frozen-parameter checksums.
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// An in-memory checkpoint: named f32 arrays in a stable order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: Vec<(TensorEntry, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let offset = self
            .entries
            .last()
            .map(|(e, d)| e.offset + d.len() as u64)
            .unwrap_or(0);
        self.entries.push((
            TensorEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
                offset,
            },
            data,
        ));
    }

    pub fn push_params(&mut self, params: &[(String, Tensor)]) {
        for (name, t) in params {
            self.push(name, t.shape(), t.to_vec());
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(e, _)| e.name.as_str()).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&TensorEntry, &Vec<f32>)> {
        self.entries.iter().map(|(e, d)| (e, d))
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.entries
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, d)| (e.shape.as_slice(), d.as_slice()))
    }

    /// Copy stored values into a live parameter list; every parameter must be
    /// present with a matching shape (named-diff error otherwise).
    pub fn load_into(&self, params: &[(String, Tensor)]) -> Result<()> {
        for (name, p) in params {
            let (shape, data) = self.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor `{name}` (checkpoint has: {:?})", self.names()))
            })?;
            if shape != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` shape {:?} in file, model expects {:?}",
                    shape,
                    p.shape()
                )));
            }
            p.set_data(data.to_vec());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header: Vec<&TensorEntry> = self.entries.iter().map(|(e, _)| e).collect();
        let header_json = serde_json::to_vec(&header).expect("header serialization");
        let payload_len: usize = self.entries.iter().map(|(_, d)| d.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + header_json.len() + payload_len + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        let payload_start = out.len();
        for (_, data) in &self.entries {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32(&out[payload_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 {
            return Err(fail("truncated file"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fail("bad magic (expected PXDL)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen + 4 {
            return Err(fail("truncated header"));
        }
        let header: Vec<TensorEntry> = serde_json::from_slice(&bytes[16..16 + hlen])?;
        let payload = &bytes[16 + hlen..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let actual_crc = crc32(payload);
        if stored_crc != actual_crc {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
            )));
        }
        let mut entries = Vec::with_capacity(header.len());
        for e in header {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize * 4;
            let end = start + n * 4;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` overruns payload", e.name)));
            }
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((e, data));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}
