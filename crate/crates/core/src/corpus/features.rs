//! Region-feature files and dataset manifests.
//!
//! Feature file layout: magic `PFV1`, little-endian `u32` region count `R`,
//! `u32` dimension `d`, then `R·d` little-endian `f32` values, row-major.
//! Manifests are JSON lines of `{id, feature_path, paragraph}`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PFV1";
const HEADER: usize = 12;

pub fn write_features(path: &Path, rows: usize, dim: usize, values: &[f64]) -> Result<()> {
    if rows == 0 || dim == 0 || values.len() != rows * dim {
        return Err(Error::InvalidShape {
            op: "write_features",
            msg: format!("{} values for {rows}×{dim}", values.len()),
        });
    }
    let mut buf = Vec::with_capacity(HEADER + 4 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let name = path.display().to_string();
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                path: name,
                found: bytes[..4].to_vec(),
            });
        }
        return Err(Error::Truncated {
            path: name,
            expected: HEADER as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: name,
            found: bytes[..4].to_vec(),
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if rows == 0 {
        return Err(Error::EmptyHeader { path: name, what: "R" });
    }
    if dim == 0 {
        return Err(Error::EmptyHeader { path: name, what: "d" });
    }
    let expected = (HEADER + 4 * rows * dim) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: name,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(values, &[rows, dim])
}

/// Loads and checks the feature dimension.
pub fn load_features_expecting(path: &Path, dim: usize) -> Result<Tensor> {
    let t = load_features(path)?;
    if t.shape()[1] != dim {
        return Err(Error::DimensionMismatch {
            path: path.display().to_string(),
            expected: dim,
            found: t.shape()[1],
        });
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub feature_path: String,
    pub paragraph: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
