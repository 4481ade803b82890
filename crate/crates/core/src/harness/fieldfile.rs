//! Binary field files.
//!
//! Layout (little endian): magic `PMRF`, `u16` version, `u32` rows, `u32`
//! cols, then `rows * cols` `f64` values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PMRF";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FieldFile {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} field",
                data.len()
            )));
        }
        Ok(FieldFile { rows, cols, data })
    }

    pub fn square(grid: usize, data: &[f64]) -> Result<Self> {
        Self::new(grid, grid, data.to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses and validates a field; `origin` names the source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |reason: String| Err(Error::format(origin, reason));
        if bytes.len() < HEADER_LEN {
            return fail(format!("{} bytes is shorter than the header", bytes.len()));
        }
        if &bytes[..4] != MAGIC {
            return fail("bad magic".into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return fail(format!("unsupported version {version}"));
        }
        let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let payload = &bytes[HEADER_LEN..];
        let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(8));
        if expected != Some(payload.len()) {
            return fail(format!(
                "payload of {} bytes does not match {rows}x{cols}",
                payload.len()
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (i, chunk) in payload.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return fail(format!("non-finite value {v} at index {i}"));
            }
            data.push(v);
        }
        Ok(FieldFile { rows, cols, data })
    }
}

pub fn save_field(path: &Path, field: &FieldFile) -> Result<()> {
    std::fs::write(path, field.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_field(path: &Path) -> Result<FieldFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FieldFile::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.pmrf");
        let f = FieldFile::new(3, 5, vec![0.0; 15]).unwrap();
        save_field(&path, &f).unwrap();
        assert_eq!(load_field(&path).unwrap(), f);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 14 + 15 * 8);
    }

    #[test]
    fn nan_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.pmrf");
        let mut bytes = FieldFile::new(2, 2, vec![1.0; 4]).unwrap().to_bytes();
        bytes[14 + 8..14 + 16].copy_from_slice(&f64::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load_field(&path).unwrap_err();
        assert_eq!(err.kind(), "FormatError");
    }

    #[test]
    fn malformed_headers() {
        let p = Path::new("mem");
        assert!(FieldFile::from_bytes(b"PMR", p).is_err());
        let mut good = FieldFile::new(1, 2, vec![1.0, 2.0]).unwrap().to_bytes();
        assert!(FieldFile::from_bytes(&good[..good.len() - 1], p).is_err());
        good[0] = b'X';
        assert!(FieldFile::from_bytes(&good, p).is_err());
        assert!(FieldFile::new(2, 2, vec![0.0; 3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn random_fields_round_trip_bitwise(
            rows in 1usize..12,
            cols in 1usize..12,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| f64::from_bits(r.random::<u64>() & !(0x7ff << 52)) * r.random_range(-1e6..1e6))
                .collect();
            let f = FieldFile::new(rows, cols, data).unwrap();
            let back = FieldFile::from_bytes(&f.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.rows, rows);
            for (a, b) in f.data.iter().zip(&back.data) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
