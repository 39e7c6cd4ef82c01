//! On-disk formats shared by every stage.
//!
//! Matrices use the "CFM1" container: the 4-byte magic `CFM1`, then the row
//! count and column count as little-endian `u32`, then `rows * cols`
//! little-endian `f64` values in row-major order. Record streams are JSON
//! lines, configs and manifests are plain JSON.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"CFM1";
const HEADER_LEN: usize = 12;

/// Serializes a matrix into a CFM1 byte buffer.
pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    out
}

/// Parses a CFM1 matrix from the front of `bytes`, returning the matrix and
/// the number of bytes consumed.
pub fn decode_matrix(bytes: &[u8]) -> Result<(DMatrix<f64>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Parse("matrix header truncated".into()));
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return Err(Error::Parse("bad matrix magic, expected CFM1".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Parse("matrix size overflows".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < len {
        return Err(Error::Parse(format!(
            "matrix body truncated: need {len} bytes, have {}",
            body.len()
        )));
    }
    let values = body[..len]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let m = DMatrix::from_row_iterator(rows, cols, values);
    Ok((m, HEADER_LEN + len))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = read_input(path)?;
    let (m, used) = decode_matrix(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Parse(format!(
            "{}: {} trailing bytes after matrix",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(m)
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, &encode_matrix(m))
}

/// Reads a file, mapping "not found" onto [`Error::MissingInput`].
pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
        _ => Error::Io(e),
    })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_input(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn encode_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, &encode_jsonl(records)?)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_input(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
