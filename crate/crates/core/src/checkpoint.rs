//! Binary checkpoint: `u64` little-endian header length, a JSON header padded
//! to 8 bytes, then the little-endian `f32` payload. Every tensor starts at
//! an 8-byte aligned offset from the start of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{ProcapError, Result};
use crate::model::ProCapModel;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub params: BTreeMap<String, TensorRecord>,
    pub vocab: Vec<String>,
    pub config: RunConfig,
    pub step: usize,
}

/// Round the model to the stored precision. A model rounded this way
/// reproduces its reloaded copy bit for bit.
pub fn round_model(model: &mut ProCapModel) {
    model.store.round_to_f32();
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

pub fn encode_checkpoint(model: &ProCapModel, config: &RunConfig, step: usize) -> Vec<u8> {
    let mut params = BTreeMap::new();
    let mut payload = Vec::new();
    for e in model.store.entries() {
        let offset = payload.len();
        for &v in e.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        payload.resize(align8(payload.len()), 0);
        params.insert(e.name.clone(), TensorRecord { shape: e.value.shape().to_vec(), dtype: "f32".into(), byte_offset: offset });
    }
    let header = CheckpointHeader { params, vocab: model.vocab.tokens().to_vec(), config: config.clone(), step };
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    json.resize(align8(json.len()), b' ');
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(path: &Path, model: &ProCapModel, config: &RunConfig, step: usize) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, config, step)).map_err(|e| ProcapError::io(path, e))
}

/// Rebuild the model described by a checkpoint.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ProCapModel, CheckpointHeader)> {
    if bytes.len() < 8 {
        return Err(ProcapError::SchemaViolation("checkpoint shorter than its length prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if 8 + hlen > bytes.len() {
        return Err(ProcapError::SchemaViolation(format!("header length {hlen} exceeds file size")));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| ProcapError::SchemaViolation(format!("checkpoint header: {e}")))?;
    let payload = &bytes[8 + hlen..];
    let vocab = Vocabulary::from_tokens(header.vocab.clone())?;
    let mut model = ProCapModel::new(header.config.model.clone(), vocab, header.config.seed)?;
    if header.params.len() != model.store.len() {
        return Err(ProcapError::SchemaViolation(format!(
            "checkpoint has {} tensors, model expects {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.entry(id).name.clone();
        let rec = header.params.get(&name).ok_or_else(|| ProcapError::SchemaViolation(format!("missing tensor {name}")))?;
        if rec.dtype != "f32" {
            return Err(ProcapError::SchemaViolation(format!("tensor {name} has dtype {}", rec.dtype)));
        }
        let expected = model.store.get(id).shape().to_vec();
        if rec.shape != expected {
            return Err(ProcapError::ShapeMismatch(format!("tensor {name}: header {:?}, model {expected:?}", rec.shape)));
        }
        let n: usize = rec.shape.iter().product();
        let end = rec.byte_offset + 4 * n;
        if rec.byte_offset % 8 != 0 || end > payload.len() {
            return Err(ProcapError::ShapeMismatch(format!(
                "tensor {name}: {n} values at offset {} do not fit a {}-byte payload",
                rec.byte_offset,
                payload.len()
            )));
        }
        let data = payload[rec.byte_offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        *model.store.get_mut(id) = Tensor::from_vec(&rec.shape, data);
    }
    Ok((model, header))
}

pub fn load_checkpoint(path: &Path) -> Result<(ProCapModel, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| ProcapError::CheckpointLoadFailure(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
