//! Embedding dumps, one file per role (little-endian):
//!
//! ```text
//! magic "CSQK" | version u16 | role u8 | count u64 | d u32 | f32 × count·d
//! ```

use std::path::Path;

use crate::error::{Error, LoadError, Result};
use crate::types::check_finite;

pub const DUMP_MAGIC: [u8; 4] = *b"CSQK";
pub const DUMP_VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 1 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query = 0,
    Key = 1,
    Value = 2,
}

impl Role {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Role::Query),
            1 => Some(Role::Key),
            2 => Some(Role::Value),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub role: Role,
    pub d: usize,
    /// Row-major, `count·d` values.
    pub rows: Vec<f32>,
}

impl EmbeddingDump {
    pub fn new(role: Role, d: usize, rows: Vec<f32>) -> Result<Self> {
        if d == 0 || !rows.len().is_multiple_of(d) {
            return Err(Error::Dimension {
                expected: d,
                actual: if d == 0 { 0 } else { rows.len() % d },
            });
        }
        Ok(Self { role, d, rows })
    }

    pub fn count(&self) -> usize {
        self.rows.len() / self.d
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 4 * self.rows.len());
        out.extend_from_slice(&DUMP_MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.push(self.role as u8);
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(parse(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }

    /// Loads a dump and checks that it holds the expected role.
    pub fn load_role(path: impl AsRef<Path>, role: Role) -> Result<Self> {
        let path = path.as_ref();
        let dump = Self::load(path)?;
        if dump.role != role {
            return Err(Error::Load(LoadError::Header {
                offset: 6,
                reason: format!("expected a {role:?} dump, found {:?}", dump.role),
            })
            .in_file(path));
        }
        Ok(dump)
    }
}

fn truncated(offset: usize, needed: usize) -> LoadError {
    LoadError::Truncated { offset, needed }
}

fn parse(bytes: &[u8]) -> Result<EmbeddingDump, LoadError> {
    if bytes.len() < HEADER {
        return Err(truncated(bytes.len(), HEADER - bytes.len()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != DUMP_MAGIC {
        return Err(LoadError::BadMagic {
            expected: DUMP_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(LoadError::Version {
            found: version,
            supported: DUMP_VERSION,
        });
    }
    let role = Role::from_byte(bytes[6]).ok_or_else(|| LoadError::Header {
        offset: 6,
        reason: format!("unknown role byte {}", bytes[6]),
    })?;
    let count = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[15..19].try_into().unwrap()) as usize;
    if d == 0 {
        return Err(LoadError::Header {
            offset: 15,
            reason: "d must be positive".into(),
        });
    }
    let body = &bytes[HEADER..];
    let needed = count
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| LoadError::Header {
            offset: 7,
            reason: format!("row count {count} × d {d} overflows"),
        })?;
    if body.len() < needed {
        return Err(truncated(bytes.len(), needed - body.len()));
    }
    if body.len() > needed {
        return Err(LoadError::TrailingBytes {
            offset: HEADER + needed,
            trailing: body.len() - needed,
        });
    }
    let rows: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    check_finite(&rows).map_err(|e| LoadError::Invariant {
        offset: HEADER,
        reason: e.to_string(),
    })?;
    Ok(EmbeddingDump { role, d, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dump = EmbeddingDump::new(Role::Key, 3, vec![1.0, -2.0, 0.5, 4.0, 5.0, 6.0]).unwrap();
        let bytes = dump.to_bytes();
        assert_eq!(bytes.len(), HEADER + 24);
        assert_eq!(EmbeddingDump::from_bytes(&bytes).unwrap(), dump);
    }

    #[test]
    fn corrupt_inputs() {
        let dump = EmbeddingDump::new(Role::Value, 2, vec![1.0; 4]).unwrap();
        let bytes = dump.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            EmbeddingDump::from_bytes(&bad),
            Err(Error::Load(LoadError::BadMagic { .. }))
        ));
        assert!(matches!(
            EmbeddingDump::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Load(LoadError::Truncated { .. }))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            EmbeddingDump::from_bytes(&long),
            Err(Error::Load(LoadError::TrailingBytes { .. }))
        ));
        let mut role = bytes;
        role[6] = 9;
        assert!(matches!(
            EmbeddingDump::from_bytes(&role),
            Err(Error::Load(LoadError::Header { offset: 6, .. }))
        ));
    }
}
