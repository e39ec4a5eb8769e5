//! External key-value memory of object names, queried by cosine similarity.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ProcapError, Result};
use crate::tensor::Tensor;

/// Name used to pad retrieval results. Maps to the `<null>` token.
pub const NULL_NAME: &str = "";

/// Allowed deviation of a stored key from unit norm.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Score reported for padding slots.
pub const NULL_SCORE: f64 = -1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct KbEntry {
    pub name: String,
    pub key: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBase {
    dim: usize,
    entries: Vec<KbEntry>,
}

impl KnowledgeBase {
    /// Validating constructor: keys must have length `dim` and unit norm,
    /// names must be non-empty.
    pub fn new(dim: usize, entries: Vec<KbEntry>) -> Result<Self> {
        for (index, e) in entries.iter().enumerate() {
            if e.name.is_empty() {
                return Err(ProcapError::SchemaViolation(format!("knowledge base entry {index} has an empty name")));
            }
            if e.key.len() != dim {
                return Err(ProcapError::DimensionMismatch(format!(
                    "knowledge base entry {index} has {} dims, expected {dim}",
                    e.key.len()
                )));
            }
            let norm = l2(&e.key);
            if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(ProcapError::NormViolation { index, name: e.name.clone(), norm });
            }
        }
        Ok(Self { dim, entries })
    }

    /// Build from raw (unnormalized) embeddings. Keys are normalized and then
    /// rounded to 32-bit precision so that a saved file reloads bit-exactly.
    pub fn from_embeddings(dim: usize, raw: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if raw.is_empty() {
            return Err(ProcapError::EmptyRefs);
        }
        let entries = raw
            .into_iter()
            .map(|(name, key)| {
                let key = normalized(&key).into_iter().map(|v| v as f32 as f64).collect();
                KbEntry { name, key }
            })
            .collect();
        Self::new(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Top-K names for one query. Always exactly K slots.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedContext {
    pub names: Vec<String>,
    pub scores: Vec<f64>,
    /// KB entry index behind each slot (`None` for padding).
    pub indices: Vec<Option<usize>>,
}

impl RetrievedContext {
    /// K null names, as used by the retrieval ablation.
    pub fn null(k: usize) -> Self {
        Self { names: vec![NULL_NAME.to_string(); k], scores: vec![NULL_SCORE; k], indices: vec![None; k] }
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = l2(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// L2-normalized mean of the rows of `q_p` (`[L, D]`). A zero mean stays zero.
pub fn query_vector(q_p: &Tensor) -> Vec<f64> {
    let (r, c) = (q_p.rows(), q_p.cols());
    let mut mean = vec![0.0; c];
    for i in 0..r {
        for (m, x) in mean.iter_mut().zip(q_p.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= r as f64);
    normalized(&mean)
}

/// Retrieve the top-`k` distinct names for the query set `q_p`.
pub fn retrieve(q_p: &Tensor, kb: &KnowledgeBase, k: usize) -> Result<RetrievedContext> {
    if q_p.shape().len() != 2 || q_p.rows() == 0 {
        return Err(ProcapError::DimensionMismatch(format!("query set must be [L, D], got {:?}", q_p.shape())));
    }
    retrieve_with_vector(&query_vector(q_p), kb, k)
}

/// Retrieval for an already-formed query vector (normalized by the caller).
pub fn retrieve_with_vector(q: &[f64], kb: &KnowledgeBase, k: usize) -> Result<RetrievedContext> {
    if kb.is_empty() {
        return Err(ProcapError::EmptyKnowledgeBase);
    }
    if q.len() != kb.dim() {
        return Err(ProcapError::DimensionMismatch(format!("query has {} dims, knowledge base {}", q.len(), kb.dim())));
    }
    if k == 0 {
        return Err(ProcapError::InvalidConfig("retrieval needs K >= 1".into()));
    }
    let scores: Vec<f64> =
        kb.entries().iter().map(|e| e.key.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps lower indices first among equal scores.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    let mut out = RetrievedContext { names: Vec::with_capacity(k), scores: Vec::with_capacity(k), indices: Vec::with_capacity(k) };
    let mut seen = HashSet::new();
    for i in order {
        if out.names.len() == k {
            break;
        }
        let name = &kb.entries()[i].name;
        if seen.insert(name.as_str()) {
            out.names.push(name.clone());
            out.scores.push(scores[i].clamp(-1.0, 1.0));
            out.indices.push(Some(i));
        }
    }
    while out.names.len() < k {
        out.names.push(NULL_NAME.to_string());
        out.scores.push(NULL_SCORE);
        out.indices.push(None);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbFile {
    dim: usize,
    entries: Vec<KbFileEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbFileEntry {
    name: String,
    key: Vec<f32>,
}

/// Write `kb.json`. `provenance` (for example the run configuration) is
/// stored alongside the entries and ignored on load.
pub fn save_kb(kb: &KnowledgeBase, path: &Path, provenance: Option<serde_json::Value>) -> Result<()> {
    let file = KbFile {
        provenance,
        dim: kb.dim,
        entries: kb
            .entries
            .iter()
            .map(|e| KbFileEntry { name: e.name.clone(), key: e.key.iter().map(|&v| v as f32).collect() })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("kb serializes");
    std::fs::write(path, text).map_err(|e| ProcapError::io(path, e))
}

/// Load and re-validate a knowledge base. An empty entry list loads; the
/// first retrieval against it fails.
pub fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ProcapError::MissingFile(path.to_path_buf()),
        _ => ProcapError::io(path, e),
    })?;
    let file: KbFile =
        serde_json::from_str(&text).map_err(|e| ProcapError::SchemaViolation(format!("{}: {e}", path.display())))?;
    let entries =
        file.entries.into_iter().map(|e| KbEntry { name: e.name, key: e.key.into_iter().map(f64::from).collect() }).collect();
    KnowledgeBase::new(file.dim, entries)
}
