//! Binary field snapshots.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset 0   b"MEMFLW01"
//! offset 8   u32 version (1)
//! offset 12  u32 N
//! offset 16  u32 components
//! offset 20  u32 N_s (0 for a single field)
//! offset 24  f64 payload: max(N_s, 1) blocks of `components` N×N arrays
//! end        u64 FNV-1a over every preceding byte
//! ```

use std::fs::File;
use std::hash::Hasher;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use fnv::FnvHasher;
use thiserror::Error;

use crate::spectral::{Field, TorusGrid};

pub const MAGIC: &[u8; 8] = b"MEMFLW01";
pub const VERSION: u32 = 1;
const HEADER: usize = 24;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte 0")]
    BadMagic,
    #[error("unsupported version {found} at byte 8")]
    BadVersion { found: u32 },
    #[error("truncated snapshot: expected {expected} bytes, found {found} (data ends at byte {found})")]
    Truncated { expected: u64, found: u64 },
    #[error("{extra} trailing bytes after byte {offset}")]
    Trailing { offset: u64, extra: u64 },
    #[error("checksum mismatch at byte {offset}: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { offset: u64, stored: u64, computed: u64 },
    #[error("snapshot holds N = {found}, {components} components; expected N = {expected_n}, {expected_components}")]
    Shape {
        found: u32,
        components: u32,
        expected_n: usize,
        expected_components: usize,
    },
    #[error("bad grid size {0} in header at byte 12")]
    BadGrid(u32),
}

/// Decoded snapshot contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub n: u32,
    pub components: u32,
    pub slices: u32,
    pub data: Vec<f64>,
}

impl Snapshot {
    fn block_len(&self) -> usize {
        self.components as usize * (self.n as usize).pow(2)
    }

    pub fn from_field<const C: usize>(f: &Field<C>) -> Self {
        Self::from_fields(std::slice::from_ref(f), 0)
    }

    /// Several fields stored with `N_s = slices`.
    pub fn from_fields<const C: usize>(fields: &[Field<C>], slices: u32) -> Self {
        let n = fields.first().map_or(0, |f| f.n()) as u32;
        let data = fields
            .iter()
            .flat_map(|f| f.comps().iter().flat_map(|c| c.iter().copied()))
            .collect();
        Self {
            n,
            components: C as u32,
            slices,
            data,
        }
    }

    fn check_shape(&self, c: usize) -> Result<TorusGrid, SnapshotError> {
        let grid = TorusGrid::new(self.n as usize).map_err(|_| SnapshotError::BadGrid(self.n))?;
        if self.components as usize != c {
            return Err(SnapshotError::Shape {
                found: self.n,
                components: self.components,
                expected_n: self.n as usize,
                expected_components: c,
            });
        }
        Ok(grid)
    }

    pub fn into_fields<const C: usize>(self) -> Result<Vec<Field<C>>, SnapshotError> {
        let grid = self.check_shape(C)?;
        let pts = grid.points();
        Ok(self
            .data
            .chunks_exact(self.block_len())
            .map(|block| {
                let comps: [Vec<f64>; C] = std::array::from_fn(|c| block[c * pts..(c + 1) * pts].to_vec());
                Field::from_components(&grid, comps)
            })
            .collect())
    }

    pub fn into_field<const C: usize>(self) -> Result<Field<C>, SnapshotError> {
        Ok(self.into_fields()?.swap_remove(0))
    }

    pub fn write_to(&self, w: impl Write) -> Result<(), SnapshotError> {
        let mut w = HashingWriter {
            inner: BufWriter::new(w),
            hash: FnvHasher::default(),
        };
        w.write_all(MAGIC)?;
        for v in [VERSION, self.n, self.components, self.slices] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        let sum = w.hash.finish();
        w.inner.write_all(&sum.to_le_bytes())?;
        w.inner.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, SnapshotError> {
        let mut bytes = Vec::new();
        BufReader::new(r).read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let found = bytes.len() as u64;
        if bytes.len() < HEADER {
            if bytes.len() >= 8 && &bytes[..8] != MAGIC {
                return Err(SnapshotError::BadMagic);
            }
            return Err(SnapshotError::Truncated {
                expected: HEADER as u64 + 8,
                found,
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = word(8);
        if version != VERSION {
            return Err(SnapshotError::BadVersion { found: version });
        }
        let (n, components, slices) = (word(12), word(16), word(20));
        let values = (n as u64).pow(2) * components as u64 * slices.max(1) as u64;
        let body_end = HEADER as u64 + 8 * values;
        let expected = body_end + 8;
        if found < expected {
            return Err(SnapshotError::Truncated { expected, found });
        }
        if found > expected {
            return Err(SnapshotError::Trailing {
                offset: expected,
                extra: found - expected,
            });
        }
        let body_end = body_end as usize;
        let mut h = FnvHasher::default();
        h.write(&bytes[..body_end]);
        let computed = h.finish();
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        if stored != computed {
            return Err(SnapshotError::Checksum {
                offset: body_end as u64,
                stored,
                computed,
            });
        }
        let data = bytes[HEADER..body_end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            n,
            components,
            slices,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SnapshotError> {
        self.write_to(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, SnapshotError> {
        Self::read_from(File::open(path)?)
    }
}

struct HashingWriter<W: Write> {
    inner: W,
    hash: FnvHasher,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let k = self.inner.write(buf)?;
        self.hash.write(&buf[..k]);
        Ok(k)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{TensorField2, VectorField};

    fn sample() -> VectorField {
        let g = TorusGrid::new(16).unwrap();
        VectorField::from_fn(&g, |x, y| [x.sin() * y.cos(), (2.0 * x).cos() - y])
    }

    fn encode(s: &Snapshot) -> Vec<u8> {
        let mut out = Vec::new();
        s.write_to(&mut out).unwrap();
        out
    }

    #[test]
    fn round_trip_is_bitwise() {
        let u = sample();
        let bytes = encode(&Snapshot::from_field(&u));
        assert_eq!(bytes.len(), 24 + 8 * 2 * 256 + 8);
        assert_eq!(&bytes[..8], MAGIC);
        let back: VectorField = Snapshot::decode(&bytes).unwrap().into_field().unwrap();
        assert_eq!(back, u);
    }

    #[test]
    fn history_round_trip() {
        let g = TorusGrid::new(16).unwrap();
        let fields: Vec<TensorField2> = (0..3)
            .map(|j| TensorField2::from_fn(&g, |x, y| [1.0, j as f64 * x, y, 1.0]))
            .collect();
        let s = Snapshot::from_fields(&fields, 3);
        let back: Vec<TensorField2> = Snapshot::decode(&encode(&s)).unwrap().into_fields().unwrap();
        assert_eq!(back, fields);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&Snapshot::from_field(&sample()));
        let cut = &bytes[..bytes.len() - 100];
        match Snapshot::decode(cut) {
            Err(SnapshotError::Truncated { expected, found }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(found, cut.len() as u64);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corruption_fails_checksum() {
        let mut bytes = encode(&Snapshot::from_field(&sample()));
        bytes[100] ^= 1;
        assert!(matches!(Snapshot::decode(&bytes), Err(SnapshotError::Checksum { offset, .. }) if offset == (24 + 8 * 512) as u64));
        let mut bytes = encode(&Snapshot::from_field(&sample()));
        bytes[0] = b'X';
        assert!(matches!(Snapshot::decode(&bytes), Err(SnapshotError::BadMagic)));
    }

    #[test]
    fn wrong_component_count() {
        let s = Snapshot::decode(&encode(&Snapshot::from_field(&sample()))).unwrap();
        assert!(matches!(s.into_field::<4>(), Err(SnapshotError::Shape { .. })));
    }
}
