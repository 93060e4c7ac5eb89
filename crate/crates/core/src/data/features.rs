//! Binary feature files: `"ECMF"`, `u32 T`, `u32 D`, then `T * D`
//! little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{FeatureSequence, VideoRecord};
use crate::error::{EcmError, Result};

const MAGIC: &[u8; 4] = b"ECMF";
const HEADER_LEN: usize = 12;

/// Writes `seq` as `f32`. Values not representable in `f32` are rounded.
pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let (t, d) = seq.values().dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in seq.values().iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| EcmError::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| EcmError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| EcmError::io(path, e))?;
    let err = |message: String| EcmError::FeatureFile {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(err("bad magic, expected ECMF".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| err(format!("header T={t} D={d} overflows")))?;
    if payload.len() != expected {
        return Err(err(format!(
            "payload has {} floats but header T={t} D={d} requires {}",
            payload.len() / 4,
            t * d
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(err(format!("non-finite value at index {pos}")));
    }
    let values = Array2::from_shape_vec((t, d), values).map_err(|e| err(e.to_string()))?;
    FeatureSequence::new(values).map_err(|e| err(e.to_string()))
}

pub fn load_features(record: &VideoRecord) -> Result<FeatureSequence> {
    read_features(&record.feature_path)
}
