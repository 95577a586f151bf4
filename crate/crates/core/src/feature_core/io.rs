//! FMAP: little-endian feature-map exchange format.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "FMAP"
//! 4       1           version (1)
//! 5       1           dtype (0 = f32)
//! 6       4           domain_id u32
//! 10      16          A, H, W, C as u32
//! 26      4*A         agent ids u32
//! ..      4*A*H*W*C   f32 payload, row-major [A, H, W, C]
//! ```

use std::fs;
use std::path::Path;

use super::FeatureMap;
use crate::error::{FormatError, Result};
use crate::tensor::{Real, Tensor};

pub const FMAP_MAGIC: [u8; 4] = *b"FMAP";
pub const FMAP_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 26;

/// Serializes to FMAP bytes. f64 maps are rounded to f32.
pub fn encode_fmap<T: Real>(fm: &FeatureMap<T>) -> Vec<u8> {
    let (a, h, w, c) = fm.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * a + 4 * fm.data().numel());
    out.extend_from_slice(&FMAP_MAGIC);
    out.push(FMAP_VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&fm.domain_id().to_le_bytes());
    for d in [a, h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for id in fm.agent_ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for v in fm.data().data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub(crate) struct Reader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated { needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_fmap(bytes: &[u8]) -> Result<FeatureMap<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != FMAP_MAGIC {
        return Err(FormatError::BadMagic { expected: FMAP_MAGIC, found: magic }.into());
    }
    let version = r.take(1)?[0];
    if version != FMAP_VERSION {
        return Err(FormatError::VersionMismatch { expected: FMAP_VERSION, found: version }.into());
    }
    let dtype = r.take(1)?[0];
    if dtype != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype(dtype).into());
    }
    let domain_id = r.u32()?;
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    if dims.contains(&0) {
        return Err(FormatError::Malformed(format!("zero dimension in {:?}", dims)).into());
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| FormatError::DimensionOverflow(format!("{:?}", dims)))?;
    let a = dims[0] as usize;
    let id_bytes = r.take(4 * a)?;
    let agent_ids = id_bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().expect("4"))).collect();
    let payload = r.take(4 * count)?;
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4"))).collect();
    if r.pos != bytes.len() {
        return Err(FormatError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    FeatureMap::new(Tensor::from_vec(&shape, data)?, domain_id, agent_ids)
}

pub fn write_fmap<T: Real>(fm: &FeatureMap<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_fmap(fm))?;
    Ok(())
}

pub fn read_fmap(path: impl AsRef<Path>) -> Result<FeatureMap<f32>> {
    decode_fmap(&fs::read(path)?)
}
