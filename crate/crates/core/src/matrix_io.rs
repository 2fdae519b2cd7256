//! Little-endian binary encoding of float64 matrices.
//!
//! A standalone matrix file is the 8-byte magic `ATMX0001`, then `rows` and
//! `cols` as u64, then `rows * cols` f64 values in row-major order. Model files
//! reuse the same body encoding behind their own headers.

use std::io::{self, Read, Write};

use nalgebra::DMatrix;
use thiserror::Error;

pub const MATRIX_MAGIC: &[u8; 8] = b"ATMX0001";

/// Upper bound on element count accepted from disk, guarding allocations.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum MatrixIoError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("invalid content: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 8]) -> io::Result<()> {
    w.write_all(magic)
}

pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<(), MatrixIoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(MatrixIoError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&b).into_owned(),
        });
    }
    Ok(())
}

/// Dimensions followed by row-major values.
pub fn write_matrix_body<W: Write>(w: &mut W, m: &DMatrix<f64>) -> io::Result<()> {
    write_u64(w, m.nrows() as u64)?;
    write_u64(w, m.ncols() as u64)?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            write_f64(w, m[(i, j)])?;
        }
    }
    Ok(())
}

pub fn read_matrix_body<R: Read>(r: &mut R) -> Result<DMatrix<f64>, MatrixIoError> {
    let rows = read_u64(r)?;
    let cols = read_u64(r)?;
    if rows.saturating_mul(cols) > MAX_ELEMENTS {
        return Err(MatrixIoError::Invalid(format!("matrix {rows}x{cols} too large")));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let v = read_f64(r)?;
        if !v.is_finite() {
            return Err(MatrixIoError::Invalid("non-finite value".into()));
        }
        data.push(v);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<f64>) -> io::Result<()> {
    write_magic(&mut w, MATRIX_MAGIC)?;
    write_matrix_body(&mut w, m)
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<DMatrix<f64>, MatrixIoError> {
    expect_magic(&mut r, MATRIX_MAGIC)?;
    read_matrix_body(&mut r)
}

/// Rows of a matrix as owned vectors.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Stack equal-length rows into a matrix.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}
