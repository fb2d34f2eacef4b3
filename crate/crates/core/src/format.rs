//! Little-endian binary containers for embedding matrices (`PBEM`) and
//! label vectors (`PBLB`).
//!
//! ```text
//! PBEM: "PBEM" | version u32 = 1 | dtype u8 = 1 (f32) | ndim u8 = 2 | rows u64 | cols u64 | rows*cols f32
//! PBLB: "PBLB" | version u32 = 1 | n u64 | n u32
//! ```

use std::fs;
use std::path::Path;

use crate::data::Matrix;
use crate::error::{Error, Result};

const PBEM_MAGIC: &[u8; 4] = b"PBEM";
const PBLB_MAGIC: &[u8; 4] = b"PBLB";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const PBEM_HEADER: usize = 4 + 4 + 1 + 1 + 8 + 8;
const PBLB_HEADER: usize = 4 + 4 + 8;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Format("truncated header".into()));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

fn check_magic(cur: &mut Cursor<'_>, magic: &[u8; 4]) -> Result<()> {
    let found = cur.take(4)?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

fn check_payload(found: usize, expected: u64) -> Result<()> {
    if found as u64 != expected {
        return Err(Error::Length {
            expected,
            found: found as u64,
        });
    }
    Ok(())
}

pub fn encode_pbem(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(PBEM_HEADER + 4 * m.as_slice().len());
    out.extend_from_slice(PBEM_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(2);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a PBEM buffer without touching the values.
pub fn decode_pbem(bytes: &[u8]) -> Result<Matrix> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    check_magic(&mut cur, PBEM_MAGIC)?;
    let dtype = cur.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {dtype}")));
    }
    let ndim = cur.u8()?;
    if ndim != 2 {
        return Err(Error::Format(format!(
            "expected 2 dimensions, found {ndim}"
        )));
    }
    let rows = cur.u64()?;
    let cols = cur.u64()?;
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    let payload = cur.rest();
    check_payload(payload.len(), expected)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::new(rows as usize, cols as usize, data)
}

pub fn write_pbem(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    fs::write(path, encode_pbem(m))?;
    Ok(())
}

/// Reads a PBEM file as stored.
pub fn read_pbem(path: impl AsRef<Path>) -> Result<Matrix> {
    decode_pbem(&fs::read(path)?)
}

/// Reads a PBEM file and L2-normalizes every row.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Matrix> {
    let mut m = read_pbem(path)?;
    m.normalize_rows()?;
    Ok(m)
}

pub fn encode_pblb(labels: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PBLB_HEADER + 4 * labels.len());
    out.extend_from_slice(PBLB_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_pblb(bytes: &[u8]) -> Result<Vec<u32>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    check_magic(&mut cur, PBLB_MAGIC)?;
    let n = cur.u64()?;
    let expected = n
        .checked_mul(4)
        .ok_or_else(|| Error::Format("label count overflows".into()))?;
    let payload = cur.rest();
    check_payload(payload.len(), expected)?;
    Ok(payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u32]) -> Result<()> {
    fs::write(path, encode_pblb(labels))?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    decode_pblb(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn rows_are_normalized_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pbem");
        write_pbem(&path, &matrix(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]])).unwrap();
        let m = load_embeddings(&path).unwrap();
        assert_eq!(m.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(m.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn short_payload_is_a_length_error() {
        let mut bytes = encode_pbem(&Matrix::zeros(3, 2));
        bytes[10..18].copy_from_slice(&4u64.to_le_bytes());
        assert!(matches!(
            decode_pbem(&bytes),
            Err(Error::Length {
                expected: 32,
                found: 24
            })
        ));
    }

    #[test]
    fn header_fields_are_validated() {
        let good = encode_pbem(&Matrix::zeros(1, 1));
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_pbem(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_pbem(&bad_version), Err(Error::Format(_))));
        let mut bad_dtype = good.clone();
        bad_dtype[8] = 2;
        assert!(matches!(decode_pbem(&bad_dtype), Err(Error::Format(_))));
        assert!(matches!(decode_pbem(&good[..5]), Err(Error::Format(_))));
    }

    #[test]
    fn zero_row_is_degenerate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.pbem");
        write_pbem(&path, &matrix(&[&[1.0, 1.0], &[0.0, 0.0]])).unwrap();
        assert!(matches!(
            load_embeddings(&path),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_pbem(&matrix(&[&[1.5]]));
        assert_eq!(&bytes[..4], b"PBEM");
        assert_eq!(bytes.len(), 26 + 4);
        assert_eq!(&bytes[26..], &1.5f32.to_le_bytes());
        let lb = encode_pblb(&[0, 1, 0]);
        assert_eq!(&lb[..4], b"PBLB");
        assert_eq!(decode_pblb(&lb).unwrap(), vec![0, 1, 0]);
    }
}
