//! Raw little-endian blobs and JSON documents shared by every on-disk format.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_f32_blob(path: &Path, values: &[f32]) -> Result<()> {
    fs::write(path, encode_f32(values)).map_err(|e| Error::io(path, e))
}

/// Reads exactly `dims.product()` f32 values; any other length is a parse error.
pub fn read_f32_blob(path: &Path, dims: &[usize]) -> Result<Vec<f32>> {
    let expected = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::parse(path, 0, format!("shape {dims:?} overflows")))?
        / 4;
    let bytes = read_blob_bytes(path)?;
    if bytes.len() != expected * 4 {
        let offset = bytes.len().min(expected * 4) as u64;
        return Err(Error::parse(
            path,
            offset,
            format!(
                "blob holds {} bytes, manifest implies {}",
                bytes.len(),
                expected * 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_i8_blob(path: &Path, values: &[i8]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| v as u8).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_byte_blob(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = read_blob_bytes(path)?;
    if bytes.len() != expected {
        return Err(Error::parse(
            path,
            bytes.len().min(expected) as u64,
            format!(
                "blob holds {} bytes, manifest implies {expected}",
                bytes.len()
            ),
        ));
    }
    Ok(bytes)
}

fn read_blob_bytes(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::parse(
            path,
            0,
            format!("missing blob {:?}", path.file_name().unwrap_or_default()),
        )),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a UTF-8 text file; a missing or non-UTF-8 file is a parse error.
pub fn read_text(path: &Path) -> Result<String> {
    match fs::read_to_string(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::parse(path, 0, "file not found"))
        }
        Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
            Err(Error::parse(path, 0, "file is not valid UTF-8"))
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(path, &read_text(path)?)
}

pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let offset = byte_offset(text, e.line(), e.column());
        Error::parse(path, offset, e.to_string())
    })
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len()) as u64
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
