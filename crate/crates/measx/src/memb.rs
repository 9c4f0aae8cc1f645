//! Precomputed token vectors, one binary file per document.
//!
//! Layout: `"MEMB"`, token count (u32 LE), dim (u32 LE), then `count * dim`
//! little-endian f64 values, row-major.

use std::fs;
use std::path::Path;

use measx_core::corpus::{self, Corpus};
use measx_core::math::Mat;
use measx_core::tagger::Embeddings;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MEMB";
pub const EXTENSION: &str = "memb";

pub fn encode(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Mat, String> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err("not a MEMB file".into());
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != rows * cols * 8 {
        return Err(format!("expected {} bytes of values for {rows}x{cols}, found {}", rows * cols * 8, body.len()));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Mat::from_vec(rows, cols, data))
}

pub fn write(path: &Path, m: &Mat) -> Result<()> {
    fs::write(path, encode(m)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::Data(format!("{}: {m}", path.display())))
}

/// Load `<dir>/<docId>.memb` for every document, checking token count and width.
pub fn load_for(dir: &Path, corpus: &Corpus, dim: usize) -> Result<Embeddings> {
    let mut out = Embeddings::new();
    for d in &corpus.docs {
        let p = dir.join(format!("{}.{EXTENSION}", d.doc.doc_id));
        if !p.exists() {
            return Err(Error::Data(format!("embedding file missing: {}", p.display())));
        }
        let m = read(&p)?;
        let n = corpus::tokenize(&d.doc).len();
        if m.rows != n || m.cols != dim {
            return Err(Error::Data(format!(
                "{}: dimension mismatch, expected {n}x{dim} found {}x{}",
                p.display(),
                m.rows,
                m.cols
            )));
        }
        out.insert(d.doc.doc_id.clone(), m);
    }
    Ok(out)
}
