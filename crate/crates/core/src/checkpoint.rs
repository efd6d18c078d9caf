//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DCFMCKPT"                 8 bytes
//! version: u32                currently 1
//! repeated until end of file:
//!   name_len: u32
//!   name: name_len bytes of UTF-8
//!   rank: u32
//!   extents: rank × u32
//!   values: product(extents) × f64
//! ```

use std::path::Path;

use crate::params::ParamStore;
use crate::tensorlab::Tensor;
use crate::{DcfmError, Result};

pub const MAGIC: &[u8; 8] = b"DCFMCKPT";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.total_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for p in store.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Named arrays in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(DcfmError::Checkpoint("bad magic, not a DCFMCKPT file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DcfmError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| DcfmError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| DcfmError::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Overwrite every parameter of `store` from the file contents. Names and
/// shapes must match exactly.
pub fn restore(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let entries = decode(bytes)?;
    if entries.len() != store.len() {
        return Err(DcfmError::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, value) in entries {
        let id = store
            .find(&name)
            .ok_or_else(|| DcfmError::Checkpoint(format!("unknown parameter {name}")))?;
        if store.get(id).shape() != value.shape() {
            return Err(DcfmError::Checkpoint(format!(
                "{name}: shape {:?} in file, {:?} in model",
                value.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = value;
    }
    Ok(())
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| DcfmError::io(path, e))
}

pub fn load(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| DcfmError::io(path, e))?;
    restore(store, &bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DcfmError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
