//! Versioned binary container shared by every snapshot kind.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[8] | version:u32 | record_count:u64 | { len:u64 | bytes[len] } * record_count
//! ```
//!
//! Float tensors are stored as packed little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub type Magic = [u8; 8];

pub struct SnapshotWriter {
    magic: Magic,
    version: u32,
    records: Vec<Vec<u8>>,
}

impl SnapshotWriter {
    pub fn new(magic: Magic, version: u32) -> Self {
        Self {
            magic,
            version,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, bytes: Vec<u8>) {
        self.records.push(bytes);
    }

    pub fn push_json<T: Serialize>(&mut self, value: &T) {
        // Serializing plain data structs to a Vec cannot fail.
        self.push(serde_json::to_vec(value).expect("snapshot record serializes"));
    }

    pub fn push_f64s(&mut self, values: &[f64]) {
        self.push(encode_f64s(values));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body: usize = self.records.iter().map(|r| r.len() + 8).sum();
        let mut out = Vec::with_capacity(20 + body);
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.len() as u64).to_le_bytes());
            out.extend_from_slice(r);
        }
        out
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub struct SnapshotReader {
    records: std::vec::IntoIter<Vec<u8>>,
}

impl SnapshotReader {
    pub fn open(path: impl AsRef<Path>, magic: Magic, version: u32) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic, version)
    }

    pub fn from_bytes(bytes: &[u8], magic: Magic, version: u32) -> Result<Self> {
        if bytes.len() < 20 {
            if bytes.len() >= 8 && bytes[..8] != magic {
                return Err(bad_magic(&bytes[..8], &magic));
            }
            return Err(Error::Corrupt(format!(
                "header truncated ({} bytes)",
                bytes.len()
            )));
        }
        if bytes[..8] != magic {
            return Err(bad_magic(&bytes[..8], &magic));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if found != version {
            return Err(Error::Version(format!(
                "expected version {version}, found {found}"
            )));
        }
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut pos = 20;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            if bytes.len() - pos < 8 {
                return Err(Error::Corrupt(format!(
                    "record {i} of {count}: length prefix truncated"
                )));
            }
            let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
            pos += 8;
            if bytes.len() - pos < len {
                return Err(Error::Corrupt(format!(
                    "record {i} of {count}: expected {len} bytes, {} left",
                    bytes.len() - pos
                )));
            }
            records.push(bytes[pos..pos + len].to_vec());
            pos += len;
        }
        if pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after last record",
                bytes.len() - pos
            )));
        }
        Ok(Self {
            records: records.into_iter(),
        })
    }

    pub fn remaining(&self) -> usize {
        self.records.len()
    }

    pub fn next_record(&mut self) -> Result<Vec<u8>> {
        self.records
            .next()
            .ok_or_else(|| Error::Corrupt("missing record".into()))
    }

    pub fn next_json<T: DeserializeOwned>(&mut self) -> Result<T> {
        let bytes = self.next_record()?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn next_f64s(&mut self, expected: usize) -> Result<Vec<f64>> {
        let v = decode_f64s(&self.next_record()?)?;
        if v.len() != expected {
            return Err(Error::Corrupt(format!(
                "tensor has {} values, header says {expected}",
                v.len()
            )));
        }
        Ok(v)
    }
}

fn bad_magic(found: &[u8], expected: &Magic) -> Error {
    Error::Version(format!(
        "bad magic {:?}, expected {:?}",
        String::from_utf8_lossy(found),
        String::from_utf8_lossy(expected)
    ))
}

pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Corrupt(format!(
            "float tensor of {} bytes is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
