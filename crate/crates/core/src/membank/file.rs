//! `HCMB` bank container, version 1. All integers little-endian.
//!
//! ```text
//! header      "HCMB" | u32 version | u32 dim | u32 levels | u32 count × levels
//! embeddings  per level, count × dim f32, row-major
//! texts       per node (level order): u32 byte length | UTF-8 bytes
//! topology    per node: u32 parent id (0xFFFFFFFF at the top level),
//!             then u32 leaf span per level-1 node
//! provenance  u32 byte length | JSON
//! trailer     u64 CRC-64/XZ of everything above
//! ```
//!
//! Children, member counts and higher-level spans are derived from the
//! topology block on load.

use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use super::{BankLevel, MemoryBank, MemoryNode, Provenance, NO_PARENT};
use crate::error::{Error, Result};
use crate::vector::EmbeddingMatrix;

pub const MAGIC: &[u8; 4] = b"HCMB";
pub const FORMAT_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn encode(bank: &MemoryBank) -> Vec<u8> {
    let mut out = Vec::new();
    let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    out.extend_from_slice(MAGIC);
    put(&mut out, FORMAT_VERSION);
    put(&mut out, bank.dim() as u32);
    put(&mut out, bank.num_levels() as u32);
    for l in bank.levels() {
        put(&mut out, l.len() as u32);
    }
    for l in bank.levels() {
        for x in l.embeddings.as_flat() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for l in bank.levels() {
        for n in &l.nodes {
            put(&mut out, n.text.len() as u32);
            out.extend_from_slice(n.text.as_bytes());
        }
    }
    for l in bank.levels() {
        for n in &l.nodes {
            put(&mut out, n.parent.unwrap_or(NO_PARENT));
        }
    }
    for n in &bank.levels()[0].nodes {
        put(&mut out, n.leaf_span);
    }
    let prov = serde_json::to_vec(bank.provenance()).expect("provenance serializes");
    put(&mut out, prov.len() as u32);
    out.extend_from_slice(&prov);
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<MemoryBank> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing HCMB magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if bytes.len() < 8 + 8 {
        return Err(Error::Corrupt("truncated".into()));
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    let computed = CRC64.checksum(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut cur = Cursor {
        buf: payload,
        pos: 8,
    };
    let dim = cur.u32()? as usize;
    let num_levels = cur.u32()? as usize;
    if dim == 0 || num_levels == 0 {
        return Err(Error::Corrupt("zero dimension or level count".into()));
    }
    let counts = (0..num_levels)
        .map(|_| cur.u32().map(|c| c as usize))
        .collect::<Result<Vec<_>>>()?;

    let mut matrices = Vec::with_capacity(num_levels);
    for &c in &counts {
        let raw = cur.take(
            c.checked_mul(dim * 4)
                .ok_or_else(|| Error::Corrupt("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        matrices.push(EmbeddingMatrix::from_flat(dim, data)?);
    }
    let mut texts: Vec<Vec<String>> = Vec::with_capacity(num_levels);
    for &c in &counts {
        let mut level = Vec::with_capacity(c);
        for _ in 0..c {
            let len = cur.u32()? as usize;
            let s = std::str::from_utf8(cur.take(len)?)
                .map_err(|e| Error::Corrupt(format!("invalid UTF-8 text: {e}")))?;
            level.push(s.to_owned());
        }
        texts.push(level);
    }
    let mut parents: Vec<Vec<u32>> = Vec::with_capacity(num_levels);
    for &c in &counts {
        parents.push((0..c).map(|_| cur.u32()).collect::<Result<_>>()?);
    }
    let base_spans: Vec<u32> = (0..counts[0]).map(|_| cur.u32()).collect::<Result<_>>()?;
    let prov_len = cur.u32()? as usize;
    let provenance: Provenance = serde_json::from_slice(cur.take(prov_len)?)
        .map_err(|e| Error::Corrupt(format!("provenance block: {e}")))?;
    if cur.pos != payload.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes",
            payload.len() - cur.pos
        )));
    }

    let mut levels: Vec<BankLevel> = Vec::with_capacity(num_levels);
    let mut spans = base_spans;
    for (idx, (matrix, level_texts)) in matrices.into_iter().zip(texts).enumerate() {
        let level = idx + 1;
        let mut children: Vec<Vec<u32>> = vec![Vec::new(); counts[idx]];
        if idx > 0 {
            let mut next_spans = vec![0u32; counts[idx]];
            for (child, &p) in parents[idx - 1].iter().enumerate() {
                let slot = children.get_mut(p as usize).ok_or_else(|| {
                    Error::Corrupt(format!(
                        "level {} node {child} has parent {p} out of range",
                        level - 1
                    ))
                })?;
                slot.push(child as u32);
                next_spans[p as usize] = next_spans[p as usize].saturating_add(spans[child]);
            }
            spans = next_spans;
        }
        let nodes = level_texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| {
                let parent = parents[idx][i];
                MemoryNode {
                    level,
                    node_id: i as u32,
                    text,
                    member_count: if idx == 0 {
                        spans[i]
                    } else {
                        children[i].len() as u32
                    },
                    leaf_span: spans[i],
                    parent: (parent != NO_PARENT).then_some(parent),
                    children: std::mem::take(&mut children[i]),
                }
            })
            .collect();
        levels.push(BankLevel {
            nodes,
            embeddings: matrix,
        });
    }
    MemoryBank::new(levels, provenance)
}

pub fn save_bank(bank: &MemoryBank, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(bank)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: &Path) -> Result<MemoryBank> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
