//! Named-tensor checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "TJCKPT\0\0"
//! version  u32       currently 1
//! count    u32       number of records
//! record   repeated `count` times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (u64 each, ndim of them)
//!   data     f64 LE, product(dims) values
//! ```

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::CheckpointError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TJCKPT\0\0";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = c.u32()? as usize;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = c.pos;
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| CheckpointError::BadName(at))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Duplicate(name));
        }
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(CheckpointError::Truncated(c.pos))?;
        let bytes = c.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(c.pos))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    records: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    w.write_all(&encode_checkpoint(records))?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}
