//! Flat binary parameter container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MPRM" version count
//! repeated count times:
//!     name_len name_bytes rank dim_0 .. dim_{rank-1} values (f64 LE, row-major)
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use super::{NetError, ParamStore};

pub const MAGIC: &[u8; 4] = b"MPRM";
pub const VERSION: u32 = 1;

pub type Record = (String, Vec<usize>, Vec<f64>);

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.values {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NetError::Checkpoint(String::from("truncated container")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>, NetError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NetError::Checkpoint(String::from("bad magic")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NetError::Checkpoint(alloc::format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| NetError::Checkpoint(String::from("parameter name is not UTF-8")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| NetError::Checkpoint(String::from("shape overflow")))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        out.push((String::from(name), shape, values));
    }
    if r.pos != bytes.len() {
        return Err(NetError::Checkpoint(String::from("trailing bytes after last record")));
    }
    Ok(out)
}

/// Overwrite a store's values from encoded bytes.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<(), NetError> {
    store.load_records(&decode(bytes)?)
}
