//! Checkpoint files: `DRCKPT`, a little-endian u16 version, a little-endian
//! u32 header length, the UTF-8 JSON header, then every tensor as raw
//! little-endian f32 in header order. Tensor offsets are byte offsets from
//! the start of the data section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"DRCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Training metadata carried alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    training: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model, meta: &TrainingMeta) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = model
        .param_names()
        .iter()
        .zip(model.params())
        .map(|(name, p)| {
            let length = p.numel() * 4;
            let entry = TensorEntry {
                name: name.clone(),
                shape: p.shape().to_vec(),
                offset,
                length,
            };
            offset += length;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        training: meta.clone(),
        tensors,
    })?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::invalid("save", "header too large"))?;
    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Truncated(format!("{what}: need {n} bytes, {} left", bytes.len())));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Decodes and validates a checkpoint; the model id is left at its default.
pub fn load_bytes(bytes: &[u8]) -> Result<(Model, TrainingMeta)> {
    let mut rest = bytes;
    let magic = take(&mut rest, CHECKPOINT_MAGIC.len(), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u16::from_le_bytes(take(&mut rest, 2, "version")?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let header_len = u32::from_le_bytes(take(&mut rest, 4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&mut rest, header_len, "header")?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    header.config.validate()?;
    let data = rest;

    let mut params = Vec::new();
    for (name, shape, _) in header.config.param_specs() {
        let entry = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if entry.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                stored: entry.shape.clone(),
                expected: shape,
            }
            .into());
        }
        let numel: usize = shape.iter().product();
        if entry.length != numel * 4 {
            return Err(CheckpointError::Header(format!(
                "{name}: length {} does not match shape ({} bytes)",
                entry.length,
                numel * 4
            ))
            .into());
        }
        let end = entry
            .offset
            .checked_add(entry.length)
            .ok_or_else(|| CheckpointError::Header(format!("{name}: offset overflow")))?;
        if end > data.len() {
            return Err(CheckpointError::Truncated(format!(
                "{name}: needs bytes up to {end}, data section has {}",
                data.len()
            ))
            .into());
        }
        let values = data[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push(Tensor::new(&shape, values)?);
    }
    let model = Model::from_parts(header.config, params)?;
    Ok((model, header.training))
}

pub fn save(model: &Model, meta: &TrainingMeta, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, to_bytes(model, meta)?)?;
    Ok(())
}

/// Loads a checkpoint; the model id becomes the file stem.
pub fn load(path: &Path) -> Result<(Model, TrainingMeta)> {
    let bytes = std::fs::read(path)?;
    let (model, meta) = load_bytes(&bytes)?;
    let id = path
        .file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
    Ok((model.with_id(id), meta))
}
