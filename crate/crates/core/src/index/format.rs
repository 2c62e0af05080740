//! Binary table format (little-endian):
//!
//! ```text
//! magic "CSAT" | version u16 | flags u16 | m u32 | C u32 | L u32 | d u32 | 𝒫 u64
//! | sizes d_b × m (u32)
//! | per subspace: centroids, C·d_b values
//! | per (subspace, centroid): len u32 | indices u32 × len | scores × len
//! ```
//!
//! Flag bit 0 selects 16-bit storage for scores and centroids (f32
//! otherwise); bit 1 records that keys were normalized before scoring.
//! In-memory scores stay f32; rounding happens only here.

use std::cmp::Ordering;

use half::f16;

use super::{CsIndex, TopList};
use crate::clustering::CentroidSet;
use crate::error::{Error, LoadError, Result};
use crate::types::SubspaceLayout;

pub const MAGIC: [u8; 4] = *b"CSAT";
pub const FORMAT_VERSION: u16 = 1;

const FLAG_HALF: u16 = 1 << 0;
const FLAG_NORMALIZED_KEYS: u16 = 1 << 1;
const KNOWN_FLAGS: u16 = FLAG_HALF | FLAG_NORMALIZED_KEYS;

/// Fixed header bytes before the subspace sizes.
const FIXED_HEADER: usize = 4 + 2 + 2 + 4 * 4 + 8;

/// Norm tolerance for centroids read back from 16-bit storage.
const HALF_NORM_TOL: f64 = 1e-2;
const FULL_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreBits {
    #[default]
    F16,
    F32,
}

impl ScoreBits {
    pub fn bytes(self) -> usize {
        match self {
            ScoreBits::F16 => 2,
            ScoreBits::F32 => 4,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            16 => Some(ScoreBits::F16),
            32 => Some(ScoreBits::F32),
            _ => None,
        }
    }
}

/// Serialized size split into framing and payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteBreakdown {
    /// Fixed header plus the subspace size array.
    pub header: usize,
    /// One u32 length prefix per table.
    pub list_lengths: usize,
    pub centroids: usize,
    pub list_indices: usize,
    pub list_scores: usize,
}

impl ByteBreakdown {
    /// Centroid and list-entry bytes, i.e. everything except framing.
    pub fn payload(&self) -> usize {
        self.centroids + self.list_indices + self.list_scores
    }

    pub fn framing(&self) -> usize {
        self.header + self.list_lengths
    }

    pub fn total(&self) -> usize {
        self.payload() + self.framing()
    }
}

pub(super) fn byte_breakdown(index: &CsIndex, bits: ScoreBits) -> ByteBreakdown {
    let m = index.num_subspaces();
    let c = index.num_centroids();
    let entries: usize = index.tables.iter().map(TopList::len).sum();
    ByteBreakdown {
        header: FIXED_HEADER + 4 * m,
        list_lengths: 4 * m * c,
        centroids: c * index.dim() * bits.bytes(),
        list_indices: 4 * entries,
        list_scores: bits.bytes() * entries,
    }
}

fn put_value(out: &mut Vec<u8>, v: f32, bits: ScoreBits) {
    match bits {
        ScoreBits::F32 => out.extend_from_slice(&v.to_le_bytes()),
        ScoreBits::F16 => {
            let clamped = v.clamp(-f16::MAX.to_f32(), f16::MAX.to_f32());
            out.extend_from_slice(&f16::from_f32(clamped).to_le_bytes())
        }
    }
}

pub(super) fn serialize(index: &CsIndex, bits: ScoreBits) -> Vec<u8> {
    let mut out = Vec::with_capacity(byte_breakdown(index, bits).total());
    let mut flags = 0;
    if bits == ScoreBits::F16 {
        flags |= FLAG_HALF;
    }
    if index.normalize_keys {
        flags |= FLAG_NORMALIZED_KEYS;
    }
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for v in [
        index.num_subspaces(),
        index.num_centroids(),
        index.list_capacity,
        index.dim(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(index.prefill_len as u64).to_le_bytes());
    for &s in index.layout.sizes() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for set in &index.centroid_sets {
        for &v in set.as_flat() {
            put_value(&mut out, v, bits);
        }
    }
    for table in &index.tables {
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        let entries = stored_order(table, bits);
        for &(i, _) in &entries {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for &(_, s) in &entries {
            put_value(&mut out, s, bits);
        }
    }
    out
}

/// Entries in the order a reload produces: rounding to 16 bits can create
/// new ties, which are written index-ascending so saving is idempotent.
fn stored_order(table: &TopList, bits: ScoreBits) -> Vec<(u32, f32)> {
    let mut entries: Vec<(u32, f32)> = table.iter().collect();
    if bits == ScoreBits::F16 {
        let key = |s: f32| f16::from_f32(s.clamp(-f16::MAX.to_f32(), f16::MAX.to_f32())).to_f32();
        entries.sort_by(|a, b| {
            key(b.1)
                .partial_cmp(&key(a.1))
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
    }
    entries
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LoadError> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(LoadError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, LoadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize, bits: ScoreBits) -> Result<Vec<f32>, LoadError> {
        let width = bits.bytes();
        let bytes = self.take(n.checked_mul(width).ok_or(LoadError::Truncated {
            offset: self.pos,
            needed: usize::MAX,
        })?)?;
        Ok(match bits {
            ScoreBits::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            ScoreBits::F16 => bytes
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes(b.try_into().unwrap()).to_f32())
                .collect(),
        })
    }

    fn header_u32(&mut self, name: &str) -> Result<usize, LoadError> {
        let offset = self.pos;
        let v = self.u32()? as usize;
        if v == 0 {
            return Err(LoadError::Header {
                offset,
                reason: format!("{name} must be positive"),
            });
        }
        Ok(v)
    }
}

/// Storage width recorded in a serialized index header.
pub fn stored_score_bits(bytes: &[u8]) -> Result<ScoreBits> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(LoadError::BadMagic {
            expected: MAGIC,
            found: magic,
        }
        .into());
    }
    r.u16()?;
    Ok(if r.u16()? & FLAG_HALF != 0 {
        ScoreBits::F16
    } else {
        ScoreBits::F32
    })
}

pub(super) fn deserialize(bytes: &[u8]) -> Result<CsIndex> {
    Ok(read_index(bytes)?)
}

fn read_index(bytes: &[u8]) -> Result<CsIndex, LoadError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(LoadError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(LoadError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let flags_at = r.pos;
    let flags = r.u16()?;
    if flags & !KNOWN_FLAGS != 0 {
        return Err(LoadError::Header {
            offset: flags_at,
            reason: format!("unknown flag bits {:#06x}", flags & !KNOWN_FLAGS),
        });
    }
    let bits = if flags & FLAG_HALF != 0 {
        ScoreBits::F16
    } else {
        ScoreBits::F32
    };
    let normalize_keys = flags & FLAG_NORMALIZED_KEYS != 0;

    let m = r.header_u32("m")?;
    let c = r.header_u32("C")?;
    let capacity = r.header_u32("L")?;
    let d_at = r.pos;
    let d = r.header_u32("d")?;
    let p_at = r.pos;
    let prefill_len = r.u64()? as usize;
    if prefill_len == 0 {
        return Err(LoadError::Header {
            offset: p_at,
            reason: "prefill length must be positive".into(),
        });
    }

    let mut sizes = Vec::new();
    for b in 0..m {
        sizes.push(r.header_u32(&format!("subspace width {b}"))?);
    }
    let layout = SubspaceLayout::from_sizes(sizes).map_err(|e| LoadError::Header {
        offset: d_at,
        reason: e.to_string(),
    })?;
    if layout.dim() != d {
        return Err(LoadError::Header {
            offset: d_at,
            reason: format!("d = {d} but subspace widths sum to {}", layout.dim()),
        });
    }

    let norm_tol = match bits {
        ScoreBits::F16 => HALF_NORM_TOL,
        ScoreBits::F32 => FULL_NORM_TOL,
    };
    let mut sets = Vec::new();
    for b in 0..m {
        let at = r.pos;
        let rows = r.values(c * layout.width(b), bits)?;
        let set = CentroidSet::from_rows(b, layout.width(b), rows, norm_tol).map_err(|e| invariant(at, e))?;
        sets.push(set);
    }

    let mut tables = Vec::new();
    for t in 0..m * c {
        let at = r.pos;
        let len = r.u32()? as usize;
        if len > capacity {
            return Err(LoadError::Invariant {
                offset: at,
                reason: format!("table {t} holds {len} entries, capacity is {capacity}"),
            });
        }
        let idx_bytes = r.take(4 * len)?;
        let indices = idx_bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let scores = r.values(len, bits)?;
        let table = TopList::from_stored(capacity, indices, scores).map_err(|e| invariant(at, e))?;
        tables.push(table);
    }
    if r.pos != bytes.len() {
        return Err(LoadError::TrailingBytes {
            offset: r.pos,
            trailing: bytes.len() - r.pos,
        });
    }

    CsIndex::from_parts(layout, sets, tables, capacity, prefill_len, normalize_keys)
        .map_err(|e| invariant(FIXED_HEADER, e))
}

fn invariant(offset: usize, e: Error) -> LoadError {
    let reason = match e {
        Error::Parameter(msg) => msg,
        other => other.to_string(),
    };
    LoadError::Invariant { offset, reason }
}
