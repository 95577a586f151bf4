//! MPDC: named-tensor checkpoint format.
//!
//! ```text
//! field            encoding
//! magic            "MPDC"
//! version          u8 (1)
//! dtype            u8 (0 = f32, 1 = f64)
//! meta             u32 length + UTF-8 text
//! section count    u32
//! per section      u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
//!                  little-endian payload in dtype, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{ensure, FormatError, Result};
use crate::feature_core::io::Reader;
use crate::nn::ParamStore;
use crate::tensor::{Precision, Real, Tensor};

pub const CKPT_MAGIC: [u8; 4] = *b"MPDC";
pub const CKPT_VERSION: u8 = 1;

fn dtype_code(p: Precision) -> u8 {
    match p {
        Precision::F32 => 0,
        Precision::F64 => 1,
    }
}

/// Decoded checkpoint; payloads are widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub precision: Precision,
    pub meta: String,
    pub sections: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter of `store`; each must have a same-shaped section.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self
                .get(&name)
                .ok_or_else(|| FormatError::Malformed(format!("checkpoint has no section {name}")))?;
            store.set(id, t.cast())?;
        }
        Ok(())
    }
}

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>, meta: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.push(dtype_code(T::PRECISION));
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            match T::PRECISION {
                Precision::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    out
}

fn utf8(bytes: &[u8], what: &str) -> std::result::Result<String, FormatError> {
    String::from_utf8(bytes.to_vec()).map_err(|_| FormatError::Malformed(format!("{what} is not UTF-8")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != CKPT_MAGIC {
        return Err(FormatError::BadMagic { expected: CKPT_MAGIC, found: magic }.into());
    }
    let version = r.take(1)?[0];
    if version != CKPT_VERSION {
        return Err(FormatError::VersionMismatch { expected: CKPT_VERSION, found: version }.into());
    }
    let precision = match r.take(1)?[0] {
        0 => Precision::F32,
        1 => Precision::F64,
        d => return Err(FormatError::UnsupportedDtype(d).into()),
    };
    let width = if precision == Precision::F32 { 4 } else { 8 };
    let meta_len = r.u32()? as usize;
    let meta = utf8(r.take(meta_len)?, "meta")?;
    let count = r.u32()?;
    let mut sections = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = utf8(r.take(name_len)?, "section name")?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(width).is_some())
            .ok_or_else(|| FormatError::DimensionOverflow(format!("{name}: {shape:?}")))?;
        let payload = r.take(n * width)?;
        let data: Vec<f64> = if width == 4 {
            payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4")) as f64).collect()
        } else {
            payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect()
        };
        ensure!(sections.iter().all(|(n, _): &(String, _)| n != &name), InvalidArgument, "duplicate section {name}");
        sections.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }
    Ok(Checkpoint { precision, meta, sections })
}

pub fn write_checkpoint<T: Real>(store: &ParamStore<T>, meta: &str, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(store, meta))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
