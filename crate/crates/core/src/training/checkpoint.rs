//! Versioned binary parameter files.
//!
//! Layout: the magic `ECMC`, a little-endian `u32` format version, a `u32`
//! header length, a UTF-8 JSON header, then every tensor as little-endian
//! `f64` in header order. The header records the model shape and, per
//! tensor, its name and logical shape (`[kernel, in, out]` for weights,
//! `[out]` for biases).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EcmError, Result};
use crate::model::{CasSource, EcmParams, ModelShape};

const MAGIC: &[u8; 4] = b"ECMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What a checkpoint needs beyond its tensors to be used for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub categories: Vec<String>,
    pub k_ratio: f64,
    pub cas_source: CasSource,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EcmParams,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct ShapeHeader {
    feature_dim: usize,
    hidden: usize,
    categories: usize,
    share_classifier: bool,
    class_agnostic_weights: bool,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    meta: CheckpointMeta,
    shape: ShapeHeader,
    tensors: Vec<TensorHeader>,
}

pub fn encode_checkpoint(params: &EcmParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let s = params.shape();
    let tensors = params.tensors();
    let header = Header {
        format: "ecm-checkpoint".into(),
        meta: meta.clone(),
        shape: ShapeHeader {
            feature_dim: s.feature_dim,
            hidden: s.hidden,
            categories: s.categories,
            share_classifier: s.share_classifier,
            class_agnostic_weights: s.class_agnostic_weights,
        },
        tensors: tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &tensors {
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| EcmError::Checkpoint(m);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u32_at(8) as usize;
    let body_start = 12 + header_len;
    if bytes.len() < body_start {
        return Err(bad("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..body_start]).map_err(|e| bad(format!("header: {e}")))?;
    let s = &header.shape;
    let shape = ModelShape {
        feature_dim: s.feature_dim,
        hidden: s.hidden,
        categories: s.categories,
        share_classifier: s.share_classifier,
        class_agnostic_weights: s.class_agnostic_weights,
    };
    if header.meta.categories.len() != shape.categories {
        return Err(bad(format!(
            "{} category names for {} categories",
            header.meta.categories.len(),
            shape.categories
        )));
    }
    let mut params = EcmParams::zeros(&shape);
    {
        let expected = params.tensors();
        if expected.len() != header.tensors.len() {
            return Err(bad(format!(
                "{} tensors in header, model has {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for (e, h) in expected.iter().zip(&header.tensors) {
            if e.name != h.name || e.shape != h.shape {
                return Err(bad(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    h.name, h.shape, e.name, e.shape
                )));
            }
        }
    }
    let body = &bytes[body_start..];
    if body.len() != 8 * params.num_parameters() {
        return Err(bad(format!(
            "payload is {} bytes, expected {}",
            body.len(),
            8 * params.num_parameters()
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in params.tensors_mut() {
        for slot in t.data.iter_mut() {
            *slot = values.next().expect("length checked");
            if !slot.is_finite() {
                return Err(bad(format!("non-finite value in {}", t.name)));
            }
        }
    }
    Ok(Checkpoint {
        params,
        meta: header.meta,
    })
}

pub fn save_checkpoint(path: &Path, params: &EcmParams, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| EcmError::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| EcmError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| EcmError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| EcmError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        EcmError::Checkpoint(m) => EcmError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
