use std::fs;
use std::path::Path;

use super::Point;
use crate::error::{Error, Result};

const RECORD_BYTES: usize = 16;

fn io_error(path: &Path, err: impl std::fmt::Display) -> Error {
    Error::Io { path: path.display().to_string(), detail: err.to_string() }
}

/// Decodes little-endian `f32` quadruples `(x, y, z, intensity)`.
pub fn parse_bin_points(bytes: &[u8]) -> Result<Vec<Point>> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Parse {
            key: None,
            line: None,
            detail: format!("{} bytes is not a whole number of 16-byte records", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(RECORD_BYTES)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4-byte slice")) as f64;
            Point::new([f(0), f(1), f(2)], f(3))
        })
        .collect())
}

pub fn read_bin_points(path: &Path) -> Result<Vec<Point>> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    parse_bin_points(&bytes).map_err(|e| io_error(path, e))
}

/// Writes points as little-endian `f32` quadruples; precision beyond `f32`
/// is lost.
pub fn write_bin_points(path: &Path, points: &[Point]) -> Result<()> {
    let bytes: Vec<u8> = points
        .iter()
        .flat_map(|p| [p.xyz[0], p.xyz[1], p.xyz[2], p.intensity])
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

/// Reads a CSV with header `x,y,z,intensity`.
pub fn read_csv_points(path: &Path) -> Result<Vec<Point>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    let headers = reader.headers().map_err(|e| io_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "y", "z", "intensity"] {
        return Err(io_error(path, format!("expected header x,y,z,intensity, got {:?}", headers)));
    }
    reader
        .deserialize::<(f64, f64, f64, f64)>()
        .map(|row| {
            row.map(|(x, y, z, i)| Point::new([x, y, z], i))
                .map_err(|e| io_error(path, e))
        })
        .collect()
}

pub fn write_csv_points(path: &Path, points: &[Point]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    writer
        .write_record(["x", "y", "z", "intensity"])
        .map_err(|e| io_error(path, e))?;
    for p in points {
        writer
            .serialize((p.xyz[0], p.xyz[1], p.xyz[2], p.intensity))
            .map_err(|e| io_error(path, e))?;
    }
    writer.flush().map_err(|e| io_error(path, e))
}

/// Dispatches on the extension: `.csv` is CSV, anything else binary.
pub fn read_points(path: &Path) -> Result<Vec<Point>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv_points(path),
        _ => read_bin_points(path),
    }
}
