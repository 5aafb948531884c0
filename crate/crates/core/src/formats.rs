//! Binary files for precomputed embeddings and their labels.
//!
//! Matrix file: `b"APFLMAT1"`, u32 rows, u32 cols, then `rows*cols` f64
//! values row-major. Label file: `b"APFLLAB1"`, u32 rows, u32 classes,
//! then one u32 class index per row. All integers and floats little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::linalg::Matrix;

pub const MATRIX_MAGIC: &[u8; 8] = b"APFLMAT1";
pub const LABEL_MAGIC: &[u8; 8] = b"APFLLAB1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("file truncated: field at offset {offset} is missing {needed} byte(s)")]
    Truncated { offset: usize, needed: usize },
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: u32, classes: u32 },
    #[error("{0} entries do not fit the u32 header field")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        let mut buf = [0u8; N];
        let mut filled = 0;
        while filled < N {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(FormatError::Truncated {
                        offset: self.offset,
                        needed: N - filled,
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += N;
        Ok(buf)
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<(), FormatError> {
        let found = self.take::<8>()?;
        if &found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(&found).into_owned(),
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

fn header_u32(n: usize) -> Result<[u8; 4], FormatError> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| FormatError::TooLarge(n))
}

pub fn write_matrix<W: Write>(mut w: W, m: &Matrix<f64>) -> Result<(), FormatError> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&header_u32(m.rows())?)?;
    w.write_all(&header_u32(m.cols())?)?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(r: R) -> Result<Matrix<f64>, FormatError> {
    let mut c = Cursor { inner: r, offset: 0 };
    c.magic(MATRIX_MAGIC)?;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let mut data = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 24));
    for _ in 0..rows * cols {
        data.push(c.f64()?);
    }
    Ok(Matrix::from_vec(rows, cols, data).expect("length matches header"))
}

pub fn write_labels<W: Write>(mut w: W, labels: &[usize], num_classes: usize) -> Result<(), FormatError> {
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&header_u32(labels.len())?)?;
    w.write_all(&header_u32(num_classes)?)?;
    for &l in labels {
        w.write_all(&header_u32(l)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Returns `(labels, num_classes)`; every label is checked against the
/// class count in the header.
pub fn read_labels<R: Read>(r: R) -> Result<(Vec<usize>, usize), FormatError> {
    let mut c = Cursor { inner: r, offset: 0 };
    c.magic(LABEL_MAGIC)?;
    let rows = c.u32()? as usize;
    let classes = c.u32()?;
    let mut labels = Vec::with_capacity(rows.min(1 << 24));
    for row in 0..rows {
        let label = c.u32()?;
        if label >= classes {
            return Err(FormatError::LabelOutOfRange { row, label, classes });
        }
        labels.push(label as usize);
    }
    Ok((labels, classes as usize))
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Matrix<f64>) -> Result<(), FormatError> {
    write_matrix(BufWriter::new(File::create(path)?), m)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix<f64>, FormatError> {
    read_matrix(BufReader::new(File::open(path)?))
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[usize], num_classes: usize) -> Result<(), FormatError> {
    write_labels(BufWriter::new(File::create(path)?), labels, num_classes)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<(Vec<usize>, usize), FormatError> {
    read_labels(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_layout_is_exact() {
        let m = Matrix::from_rows(&[[1.0, -2.5]]).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(&buf[..8], b"APFLMAT1");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(&buf[24..32], &(-2.5f64).to_le_bytes());
        assert_eq!(buf.len(), 32);
        assert_eq!(read_matrix(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn label_layout_is_exact() {
        let mut buf = Vec::new();
        write_labels(&mut buf, &[2, 0, 1], 3).unwrap();
        assert_eq!(&buf[..8], b"APFLLAB1");
        assert_eq!(buf.len(), 8 + 8 + 12);
        assert_eq!(&buf[24..28], &1u32.to_le_bytes());
        assert_eq!(read_labels(buf.as_slice()).unwrap(), (vec![2, 0, 1], 3));
    }

    #[test]
    fn rejects_bad_magic_truncation_and_range() {
        let mut buf = Vec::new();
        write_matrix(&mut buf, &Matrix::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        assert!(matches!(
            read_labels(buf.as_slice()),
            Err(FormatError::BadMagic { .. })
        ));
        assert!(matches!(
            read_matrix(&buf[..buf.len() - 3]),
            Err(FormatError::Truncated { offset: 24, needed: 3 })
        ));

        let mut labels = Vec::new();
        write_labels(&mut labels, &[0, 1], 3).unwrap();
        // patch the class count down to 1 so the second label is invalid
        labels[12..16].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(
            read_labels(labels.as_slice()),
            Err(FormatError::LabelOutOfRange { row: 1, label: 1, classes: 1 })
        ));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_fn(3, 4, |i, j| i as f64 - j as f64 * 0.25);
        save_matrix(dir.path().join("x.bin"), &m).unwrap();
        assert_eq!(load_matrix(dir.path().join("x.bin")).unwrap(), m);
        save_labels(dir.path().join("y.bin"), &[1, 1, 0], 2).unwrap();
        assert_eq!(load_labels(dir.path().join("y.bin")).unwrap(), (vec![1, 1, 0], 2));
    }
}
