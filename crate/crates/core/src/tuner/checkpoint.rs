//! Checkpoint file format.
//!
//! Layout:
//! ```text
//! magic    8 bytes  "VIPTCKPT"
//! version  u16 LE
//! count    u32 LE
//! per entry:
//!   name_len u16 LE, name bytes (UTF-8)
//!   rank     u8
//!   dims     rank × u32 LE
//!   trainable u8
//!   offset   u64 LE      byte offset into the payload section
//! payload: little-endian f32 values, entries in manifest order
//! ```
//! Values are stored at 32-bit precision; everything else about an entry
//! (name, shape, trainable flag) round-trips exactly.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;
use crate::tuner::store::{ParamEntry, ParamSpec, ParamStore};

pub const MAGIC: &[u8; 8] = b"VIPTCKPT";
pub const VERSION: u16 = 1;

/// Serialize the store (names, shapes, trainable flags, f32 values).
pub fn save_to_vec(store: &ParamStore) -> Vec<u8> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    for e in store.entries() {
        let name = e.name.as_bytes();
        manifest.extend_from_slice(&(name.len() as u16).to_le_bytes());
        manifest.extend_from_slice(name);
        let shape = e.values.shape();
        manifest.push(shape.len() as u8);
        for &d in shape {
            manifest.extend_from_slice(&(d as u32).to_le_bytes());
        }
        manifest.push(u8::from(e.trainable));
        manifest.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &v in e.values.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    out
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, save_to_vec(store))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::CorruptHeader(format!(
                "file ends inside {what}"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse a checkpoint back into a store. Gradients and optimizer state are
/// not persisted; the loaded store is fresh in that respect.
pub fn load_from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(8, "magic").map_err(Error::Checkpoint)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = c.u16("version").map_err(Error::Checkpoint)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let count = c.u32("entry count").map_err(Error::Checkpoint)? as usize;

    struct RawEntry {
        name: String,
        shape: Vec<usize>,
        trainable: bool,
        offset: u64,
    }
    let mut raw = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = c.u16("name length").map_err(Error::Checkpoint)? as usize;
        let name_bytes = c.take(name_len, "name").map_err(Error::Checkpoint)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(CheckpointError::CorruptHeader(format!(
                "entry {i} name is not UTF-8"
            ))))?
            .to_string();
        let rank = c.take(1, "rank").map_err(Error::Checkpoint)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dimension").map_err(Error::Checkpoint)? as usize);
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(CheckpointError::CorruptHeader(format!(
                "entry `{name}` has a zero dimension"
            ))
            .into());
        }
        let trainable = match c.take(1, "trainable flag").map_err(Error::Checkpoint)?[0] {
            0 => false,
            1 => true,
            other => {
                return Err(CheckpointError::CorruptHeader(format!(
                    "entry `{name}` trainable flag is {other}"
                ))
                .into())
            }
        };
        let offset = c.u64("offset").map_err(Error::Checkpoint)?;
        raw.push(RawEntry { name, shape, trainable, offset });
    }

    let payload = &bytes[c.pos..];
    let mut store = ParamStore::new();
    for r in raw {
        let numel: usize = r.shape.iter().product();
        let need = r.offset + (numel * 4) as u64;
        if need > payload.len() as u64 {
            return Err(CheckpointError::Truncated {
                expected: c.pos as u64 + need,
                actual: bytes.len() as u64,
            }
            .into());
        }
        let start = r.offset as usize;
        let data: Vec<f64> = payload[start..start + numel * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let group = group_of(&r.name);
        let decay = r.name.ends_with(".weight");
        store.insert(ParamEntry {
            name: r.name,
            group,
            values: Tensor::new(r.shape, data).map_err(|e| {
                Error::Checkpoint(CheckpointError::CorruptHeader(e.to_string()))
            })?,
            trainable: r.trainable,
            decay,
            grad: None,
            adam_m: None,
            adam_v: None,
        });
    }
    Ok(store)
}

fn group_of(name: &str) -> crate::tuner::store::ParamGroup {
    use crate::tuner::store::ParamGroup;
    if name.starts_with("aux_embed.") {
        ParamGroup::AuxEmbed
    } else if name.starts_with("prompt.") {
        ParamGroup::Prompt
    } else {
        ParamGroup::Foundation
    }
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    load_from_bytes(&bytes)
}

/// Check a loaded store against the shapes a model config requires.
pub fn validate_against(store: &ParamStore, specs: &[ParamSpec]) -> Result<()> {
    for spec in specs {
        let entry = store
            .entries()
            .iter()
            .find(|e| e.name == spec.name)
            .ok_or_else(|| Error::Checkpoint(CheckpointError::MissingEntry(spec.name.clone())))?;
        if entry.values.shape() != spec.shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: spec.name.clone(),
                expected: spec.shape.clone(),
                actual: entry.values.shape().to_vec(),
            }
            .into());
        }
    }
    if store.len() != specs.len() {
        return Err(CheckpointError::CorruptHeader(format!(
            "checkpoint has {} entries, config expects {}",
            store.len(),
            specs.len()
        ))
        .into());
    }
    Ok(())
}
