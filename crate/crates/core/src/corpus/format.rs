//! The `HCM1` embedding container: magic, u32 count, u32 dimension, then
//! `count × dim` little-endian f32 values, row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::vector::EmbeddingMatrix;

pub const MAGIC: &[u8; 4] = b"HCM1";
const HEADER_LEN: usize = 12;

pub fn encode(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.as_flat().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.len() as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    for x in m.as_flat() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Decodes a buffer; `what` names the source in error messages.
pub fn decode(bytes: &[u8], what: &Path) -> Result<EmbeddingMatrix> {
    let bad = |message: String| Error::EmbeddingFile {
        path: what.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic, expected \"HCM1\"".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(bad("dimension is zero".into()));
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("header sizes overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(bad(format!(
            "header declares {count}×{dim} values ({expected} bytes) but body has {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::from_flat(dim, data)
}

pub fn read_file(path: &Path) -> Result<EmbeddingMatrix> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf, path)
}

pub fn write_file(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(m)).map_err(|e| Error::io(path, e))
}
