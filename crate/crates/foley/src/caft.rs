//! Binary tensor container.
//!
//! Layout, all integers little-endian `u32`:
//! `"CAFT" | version | meta_len | meta (UTF-8 JSON) | count | tensors | SHA-256 of all preceding bytes`,
//! each tensor being `name_len | name | rank | dims | f32 data`.

use std::path::Path;

use foley_core::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{FoleyError, Result};

pub const MAGIC: &[u8; 4] = b"CAFT";
pub const VERSION: u32 = 1;
const DIGEST: usize = 32;

/// Decoded file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Caft {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Caft {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("JSON values always serialize");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION);
        put(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        put(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |why: &str| FoleyError::corrupt(path, why);
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing CAFT magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(FoleyError::UnsupportedVersion {
                path: path.into(),
                found: version,
                supported: VERSION,
            });
        }
        if bytes.len() < 8 + DIGEST {
            return Err(bad("truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let meta_len = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let meta_bytes = r.take(meta_len).ok_or_else(|| bad("truncated metadata"))?;
        let meta = serde_json::from_slice(meta_bytes).map_err(|e| bad(&format!("metadata: {e}")))?;
        let count = r.u32().ok_or_else(|| bad("truncated tensor count"))?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let name_len = r.u32().ok_or_else(|| bad("truncated tensor name"))? as usize;
            let name = r.take(name_len).ok_or_else(|| bad("truncated tensor name"))?;
            let name = std::str::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?.to_owned();
            let rank = r.u32().ok_or_else(|| bad("truncated rank"))? as usize;
            if rank == 0 || rank > 8 {
                return Err(bad(&format!("tensor {i} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(|| bad("truncated dims"))? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("dimension overflow"))?;
            let raw = r
                .take(numel.checked_mul(4).ok_or_else(|| bad("dimension overflow"))?)
                .ok_or_else(|| bad(&format!("tensor {name} shorter than its shape")))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| bad(&e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| FoleyError::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| FoleyError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FoleyError::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

fn put(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
