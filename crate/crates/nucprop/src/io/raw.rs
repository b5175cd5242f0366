//! Raw little-endian 32-bit float files with JSON size sidecars.
//!
//! Scalar fields are plain row-major `f32` values; flow fields interleave
//! `(u, v)` pairs. Each `.f32` file has a `.json` sidecar carrying
//! `{"width": w, "height": h}` so a file is self-describing and
//! truncation is detectable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{atomic_write, read_bytes, IoError};
use crate::grid::{FlowField, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeSidecar {
    pub width: usize,
    pub height: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_sidecar(path: &Path, width: usize, height: usize) -> Result<(), IoError> {
    let json = serde_json::to_vec_pretty(&SizeSidecar { width, height })
        .expect("sidecar serializes");
    atomic_write(&sidecar_path(path), &json)
}

fn read_sidecar(path: &Path) -> Result<SizeSidecar, IoError> {
    let sc = sidecar_path(path);
    let bytes = read_bytes(&sc)?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json { path: sc, source })
}

fn f32_bytes(values: impl Iterator<Item = f32>, capacity: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(capacity * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_f32(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f32>, IoError> {
    if bytes.len() != expected * 4 {
        return Err(IoError::BadSize {
            path: path.to_path_buf(),
            expected: expected * 4,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write a scalar field with its sidecar (values narrowed to f32).
pub fn write_scalar(path: &Path, field: &ScalarField) -> Result<(), IoError> {
    let values = field.data().iter().map(|&v| v as f32);
    atomic_write(path, &f32_bytes(values, field.data().len()))?;
    write_sidecar(path, field.width(), field.height())
}

/// Read a scalar field, checking size against the sidecar.
pub fn read_scalar(path: &Path) -> Result<ScalarField, IoError> {
    let size = read_sidecar(path)?;
    let bytes = read_bytes(path)?;
    let values = parse_f32(path, &bytes, size.width * size.height)?;
    ScalarField::from_vec(size.width, size.height, values.into_iter().map(f64::from).collect())
        .map_err(IoError::from)
}

/// Write a flow field as interleaved `(u, v)` pairs with its sidecar.
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<(), IoError> {
    let n = flow.u().len();
    let interleaved = (0..n).flat_map(|i| [flow.u()[i], flow.v()[i]]);
    atomic_write(path, &f32_bytes(interleaved, n * 2))?;
    write_sidecar(path, flow.width(), flow.height())
}

/// Read a flow field, retagging it with the given frame-pair direction.
pub fn read_flow(path: &Path, direction: (usize, usize)) -> Result<FlowField, IoError> {
    let size = read_sidecar(path)?;
    let bytes = read_bytes(path)?;
    let values = parse_f32(path, &bytes, size.width * size.height * 2)?;
    let mut u = Vec::with_capacity(size.width * size.height);
    let mut v = Vec::with_capacity(size.width * size.height);
    for pair in values.chunks_exact(2) {
        u.push(pair[0]);
        v.push(pair[1]);
    }
    FlowField::from_components_auto_bound(size.width, size.height, u, v, direction)
        .map_err(IoError::from)
}
