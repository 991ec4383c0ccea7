//! Named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"BIRA"  u32 version  u32 count
//! count x { u32 name_len  name (UTF-8)  u8 dtype  u8 rank  rank x u32 dim  data }
//! ```
//!
//! The only dtype is `0`, 32-bit float. Entries are written in name order,
//! so saving the same tensors always produces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::denoiser::{AdapterParams, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BIRA";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub type Named = BTreeMap<String, Arc<Tensor<f32>>>;

pub fn to_bytes(named: &Named) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated archive at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Named> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("{name}: unknown dtype {dtype}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if out.insert(name.clone(), Arc::new(t)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, named: &Named) -> Result<()> {
    std::fs::write(path, to_bytes(named)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Named> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of an archive's bytes.
pub fn digest(named: &Named) -> String {
    Sha256::digest(to_bytes(named))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn save_backbone(path: &Path, d: &Denoiser<f32>) -> Result<()> {
    save(path, d.params())
}

pub fn load_backbone(path: &Path, cfg: DenoiserConfig) -> Result<Denoiser<f32>> {
    Denoiser::from_params(cfg, load(path)?)
}

pub fn save_adapter(path: &Path, a: &AdapterParams<f32>) -> Result<()> {
    save(path, &a.to_named())
}

pub fn load_adapter(path: &Path) -> Result<AdapterParams<f32>> {
    AdapterParams::from_named(load(path)?)
}
