//! MQFT feature container.
//!
//! Layout (little-endian): magic `MQFT`, `u32` version (1), `u32` rows,
//! `u32` cols, then `rows * cols` `f32` values row-major. Patch-feature files
//! append a `u32` trailer holding the patch count `P` (rows are `T * P`).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::DataError;
use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 4] = b"MQFT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Writes the header and payload of a 2-D matrix (no trailer).
/// Values are stored as `f32`.
pub fn encode_matrix(out: &mut impl Write, matrix: &Tensor) -> Result<(), DataError> {
    let (rows, cols) = matrix_dims(matrix)?;
    if !matrix.is_finite() {
        return Err(DataError::NonFinite);
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * matrix.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for &v in matrix.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn matrix_dims(matrix: &Tensor) -> Result<(u32, u32), DataError> {
    let (rows, cols) = match matrix.shape() {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        other => (other[0], other[1..].iter().product()),
    };
    let fits = |v: usize| u32::try_from(v).map_err(|_| DataError::TooLarge(v));
    Ok((fits(rows)?, fits(cols)?))
}

/// Reads one header + payload from `input`, returning a `[rows, cols]` tensor.
pub fn decode_matrix(input: &mut impl Read) -> Result<Tensor, DataError> {
    let mut header = [0u8; HEADER_LEN];
    read_exact_or(input, &mut header, DataError::BadMagic)?;
    if &header[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = rows * cols * 4;
    let mut payload = Vec::with_capacity(expected);
    input.take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(DataError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(&[rows, cols], data))
}

fn read_exact_or(input: &mut impl Read, buf: &mut [u8], short: DataError) -> Result<(), DataError> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..])? {
            0 => return Err(short),
            n => filled += n,
        }
    }
    Ok(())
}

/// Contents of a standalone MQFT file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub matrix: Tensor,
    /// Patch count from the trailer, when present.
    pub patches: Option<u32>,
}

pub fn write_features(path: &Path, matrix: &Tensor, patches: Option<u32>) -> Result<(), DataError> {
    let mut buf = Vec::new();
    encode_matrix(&mut buf, matrix)?;
    if let Some(p) = patches {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureFile, DataError> {
    let bytes = fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let matrix = decode_matrix(&mut cursor)?;
    let patches = match cursor.len() {
        0 => None,
        4 => Some(u32::from_le_bytes(cursor.try_into().unwrap())),
        n => return Err(DataError::TrailingBytes(n)),
    };
    Ok(FeatureFile { matrix, patches })
}

/// Writes `[T, P, d]` patch features as a `(T*P) x d` matrix with a `P` trailer.
pub fn write_patch_features(path: &Path, patches: &Tensor) -> Result<(), DataError> {
    let [t, p, d] = patches.shape() else {
        return Err(DataError::Invalid(format!(
            "patch features must be T x P x d, got {:?}",
            patches.shape()
        )));
    };
    let flat = patches.clone().reshaped(&[t * p, *d]);
    write_features(path, &flat, Some(*p as u32))
}

/// Reads a patch-feature file back to `[T, P, d]`.
pub fn read_patch_features(path: &Path) -> Result<Tensor, DataError> {
    let file = read_features(path)?;
    let p = file
        .patches
        .ok_or_else(|| DataError::Invalid(format!("{} has no patch trailer", path.display())))?
        as usize;
    let (rows, d) = (file.matrix.rows(), file.matrix.cols());
    if p == 0 || rows % p != 0 {
        return Err(DataError::Invalid(format!("{rows} rows not divisible by P={p}")));
    }
    Ok(file.matrix.reshaped(&[rows / p, p, d]))
}
