//! Little-endian binary tensor IO shared by dataset and checkpoint storage.
//!
//! All on-disk float payloads are f32-le; in-memory math is f64. Values that
//! round-trip through these helpers are quantized to f32 precision, which the
//! callers rely on for byte-stable reruns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::nn::Mat;
use crate::{Error, Result};

pub(crate) fn write_f32s(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub(crate) fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Manifest {
            path: path.display().to_string(),
            reason: format!("expected {} f32 values, file holds {} bytes", expected, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn write_f32_mat(path: &Path, m: &Mat) -> Result<()> {
    write_f32s(path, m.data.iter().copied())
}

pub(crate) fn read_f32_mat(path: &Path, rows: usize, cols: usize) -> Result<Mat> {
    Ok(Mat::from_vec(rows, cols, read_f32s(path, rows * cols)?))
}

pub(crate) fn write_u32s(path: &Path, values: impl Iterator<Item = u32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub(crate) fn read_u32s(path: &Path, expected: usize) -> Result<Vec<u32>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Manifest {
            path: path.display().to_string(),
            reason: format!("expected {} u32 values, file holds {} bytes", expected, bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}
