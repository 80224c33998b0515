//! Shared binary framing: 8-byte magic, `u64` little-endian header length,
//! UTF-8 JSON header, then little-endian `f32` blobs in manifest order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub name: String,
    pub len: usize,
}

/// Header envelope. `meta` carries the file-kind specific fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Envelope<M> {
    format_version: u32,
    meta: M,
    blobs: Vec<BlobSpec>,
}

pub struct ContainerWriter {
    magic: [u8; 8],
    blobs: Vec<(BlobSpec, Vec<u8>)>,
}

impl ContainerWriter {
    pub fn new(magic: &[u8; 8]) -> Self {
        Self {
            magic: *magic,
            blobs: Vec::new(),
        }
    }

    pub fn blob(&mut self, name: impl Into<String>, data: &[f32]) -> &mut Self {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.blobs.push((
            BlobSpec {
                name: name.into(),
                len: data.len(),
            },
            bytes,
        ));
        self
    }

    pub fn finish<M: Serialize>(self, meta: &M) -> Result<Vec<u8>> {
        let env = Envelope {
            format_version: FORMAT_VERSION,
            meta,
            blobs: self.blobs.iter().map(|(s, _)| s.clone()).collect(),
        };
        let header = serde_json::to_vec(&env)?;
        let body: usize = self.blobs.iter().map(|(_, b)| b.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + body);
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, b) in self.blobs {
            out.extend_from_slice(&b);
        }
        Ok(out)
    }

    pub fn write<M: Serialize>(self, path: &Path, meta: &M) -> Result<()> {
        let bytes = self.finish(meta)?;
        fs::write(path, bytes)?;
        Ok(())
    }
}

pub struct ContainerReader<M> {
    pub meta: M,
    blobs: Vec<(BlobSpec, Vec<f32>)>,
    next: usize,
}

impl<M: DeserializeOwned> ContainerReader<M> {
    pub fn parse(bytes: &[u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated("missing magic".into()));
        }
        if &bytes[..8] != magic {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated("missing header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Truncated("header".into()))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::Header(e.to_string()))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Header("missing format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch(version as u32));
        }
        let env: Envelope<M> =
            serde_json::from_value(value).map_err(|e| Error::Header(e.to_string()))?;
        let total: usize = env.blobs.iter().map(|b| b.len * 4).sum();
        let body = &bytes[hend..];
        if body.len() < total {
            return Err(Error::Truncated(format!(
                "expected {total} payload bytes, found {}",
                body.len()
            )));
        }
        if body.len() > total {
            return Err(Error::Header(format!(
                "{} trailing bytes after payload",
                body.len() - total
            )));
        }
        let mut off = 0;
        let mut blobs = Vec::with_capacity(env.blobs.len());
        for spec in env.blobs {
            let data = body[off..off + spec.len * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += spec.len * 4;
            blobs.push((spec, data));
        }
        Ok(Self {
            meta: env.meta,
            blobs,
            next: 0,
        })
    }

    pub fn open(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::parse(&bytes, magic)
    }

    /// Next blob, which must carry `name` and exactly `len` values.
    pub fn take(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        let (spec, data) = self
            .blobs
            .get_mut(self.next)
            .ok_or_else(|| Error::Header(format!("missing blob {name}")))?;
        if spec.name != name {
            return Err(Error::Header(format!(
                "expected blob {name}, found {}",
                spec.name
            )));
        }
        if spec.len != len {
            return Err(Error::Header(format!(
                "blob {name}: expected {len} values, found {}",
                spec.len
            )));
        }
        self.next += 1;
        Ok(std::mem::take(data))
    }

    pub fn finish(self) -> Result<M> {
        if self.next != self.blobs.len() {
            return Err(Error::Header(format!(
                "{} unread blobs",
                self.blobs.len() - self.next
            )));
        }
        Ok(self.meta)
    }
}
