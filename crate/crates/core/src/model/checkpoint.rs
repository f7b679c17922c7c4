//! Binary checkpoint format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "HBAF" | version u32 | header_len u64 | header (kv text)
//! | count u64 | count x { name_len u32 | name | ndim u32 | dims u64.. | data f64.. }
//! | checksum u64   (FNV-1a 64 over every preceding byte)
//! ```

use std::hash::Hasher;
use std::io::{Read, Write};
use std::path::Path;

use fnv::FnvHasher;

use super::{HbaFlowModel, ModelConfig, ModelError};
use crate::config::KvMap;
use crate::diffcore::Array;

pub const MAGIC: &[u8; 4] = b"HBAF";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Header plus named arrays, as stored on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: KvMap,
    pub arrays: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = self.header.to_text();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        // Everything past the version is only trusted once the checksum matches.
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated);
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        if fnv1a(&bytes[..body_end]) != stored {
            // a short read looks like a checksum failure; tell them apart by structure
            return Err(if Reader::parses(&bytes[..body_end]) {
                CheckpointError::Checksum
            } else {
                CheckpointError::Truncated
            });
        }
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: 8,
        };
        let (header, arrays) = r.body()?;
        if r.pos != body_end {
            return Err(CheckpointError::Format(format!("{} trailing bytes", body_end - r.pos)));
        }
        Ok(Self { header, arrays })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Whether `bytes` (without checksum) holds a structurally complete body.
    fn parses(bytes: &[u8]) -> bool {
        let mut r = Reader { bytes, pos: 8 };
        r.body().is_ok() && r.pos == bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64) -> Result<usize, CheckpointError> {
        let n = usize::try_from(v).map_err(|_| CheckpointError::Truncated)?;
        if n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        Ok(n)
    }

    fn string(&mut self, n: usize) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Format(e.to_string()))
    }

    fn body(&mut self) -> Result<(KvMap, Vec<(String, Array)>), CheckpointError> {
        let hl = self.u64()?;
        let hl = self.len(hl)?;
        let text = self.string(hl)?;
        let header = KvMap::parse(&text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let count = self.u64()?;
        let count = self.len(count)?;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = self.u32()? as usize;
            let name = self.string(nl)?;
            let ndim = self.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                let d = self.u64()?;
                dims.push(self.len(d)?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= self.bytes.len() / 8)
                .ok_or(CheckpointError::Truncated)?;
            let raw = self.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let a = Array::new(dims, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            arrays.push((name, a));
        }
        Ok((header, arrays))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}

impl HbaFlowModel {
    /// Config header plus every parameter, in store order.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: self.config.to_kv(),
            arrays: self
                .params
                .iter()
                .map(|(n, a)| (n.to_string(), a.clone()))
                .collect(),
        }
    }

    /// Rebuild a model from a checkpoint. Arrays not belonging to the model
    /// (optimizer state) are ignored; missing or misshapen parameters are errors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let config = ModelConfig::from_kv(&ckpt.header)?;
        let mut model = HbaFlowModel::new(config)?;
        for (name, value) in model.params.iter_mut() {
            let stored = ckpt
                .array(name)
                .ok_or_else(|| CheckpointError::Format(format!("missing parameter {name}")))?;
            if stored.shape() != value.shape() {
                return Err(CheckpointError::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    value.shape()
                ))
                .into());
            }
            *value = stored.clone();
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, model: &HbaFlowModel) -> Result<(), CheckpointError> {
    write_checkpoint(path, &model.to_checkpoint())
}

pub fn load_checkpoint(path: &Path) -> Result<HbaFlowModel, ModelError> {
    HbaFlowModel::from_checkpoint(&read_checkpoint(path)?)
}
