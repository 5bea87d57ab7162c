//! REPD dense matrix files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"REPD" | version: u32 = 1 | rows: u32 | cols: u32 | rows * cols f32, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"REPD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Serializes a matrix into REPD bytes.
pub fn encode(matrix: &Array2<f32>) -> Vec<u8> {
    let (rows, cols) = matrix.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    // iter() walks in logical row-major order regardless of memory layout
    for v in matrix.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses REPD bytes. `origin` is only used in error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Array2<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(origin, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(origin, "bad magic, expected REPD"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported version {version}"),
        ));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(origin, "matrix size overflows"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < expected {
        return Err(Error::format(
            origin,
            format!(
                "truncated matrix: expected {expected} data bytes for {rows}x{cols}, found {}",
                body.len()
            ),
        ));
    }
    if body.len() > expected {
        return Err(Error::format(origin, "trailing bytes after matrix"));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked above"))
}

pub fn read(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: impl AsRef<Path>, matrix: &Array2<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode(matrix))
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes a vector as a single-row matrix.
pub fn write_vector(path: impl AsRef<Path>, values: &[f32]) -> Result<()> {
    let row = Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap();
    write(path, &row)
}

/// Reads a single-row matrix back as a vector.
pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let m = read(path)?;
    if m.nrows() != 1 {
        return Err(Error::format(
            path,
            format!("expected a single-row matrix, found {} rows", m.nrows()),
        ));
    }
    Ok(m.into_raw_vec_and_offset().0)
}
