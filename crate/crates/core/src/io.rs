//! Data files and atomic output.
//!
//! Binary matrices: `u32` rows and `u32` columns (little endian), then the
//! entries as column-major little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{MfaError, Result};

/// Writes via a temporary file in the target directory and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| MfaError::Parse(format!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn encode_binary_matrix(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.nrows()).map_err(|_| MfaError::Domain("too many rows for the binary header".into()))?;
    let cols = u32::try_from(m.ncols()).map_err(|_| MfaError::Domain("too many columns for the binary header".into()))?;
    let mut out = Vec::with_capacity(8 + 8 * m.len());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_binary_matrix(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < 8 {
        return Err(MfaError::Parse("binary matrix shorter than its 8-byte header".into()));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 8 * rows * cols {
        return Err(MfaError::Parse(format!(
            "binary matrix header says {}x{} but the payload holds {} bytes",
            rows,
            cols,
            body.len()
        )));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(DMatrix::from_vec(rows, cols, values))
}

pub fn write_binary_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    atomic_write(path, &encode_binary_matrix(m)?)
}

pub fn read_binary_matrix(path: &Path) -> Result<DMatrix<f64>> {
    decode_binary_matrix(&fs::read(path)?)
}

/// Parses CSV text, one observation per row. A first row that does not
/// parse as numbers is taken as a header.
pub fn parse_csv_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| MfaError::Parse(e.to_string()))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(MfaError::Parse(format!("non-numeric value on CSV line {}", i + 1))),
        }
    }
    let cols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(MfaError::Parse(format!("CSV row {} has {} fields, expected {}", i + 1, r.len(), cols)));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn write_csv_matrix(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(h) = header {
        w.write_record(h).map_err(|e| MfaError::Parse(e.to_string()))?;
    }
    for i in 0..m.nrows() {
        let rec: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        w.write_record(&rec).map_err(|e| MfaError::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| MfaError::Parse(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Reads a data matrix; `.bin` files use the binary layout, anything else is CSV.
pub fn read_data_matrix(path: &Path) -> Result<DMatrix<f64>> {
    if path.extension().is_some_and(|e| e == "bin") {
        read_binary_matrix(path)
    } else {
        parse_csv_matrix(&fs::read_to_string(path)?)
    }
}

pub fn write_data_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    if path.extension().is_some_and(|e| e == "bin") {
        write_binary_matrix(path, m)
    } else {
        write_csv_matrix(path, m, None)
    }
}
