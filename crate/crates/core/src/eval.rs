//! Dual-captioning evaluation: scene and projection captions are scored
//! separately, each against its own ground-truth set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::compose::Split;
use crate::dataset::Dataset;
use crate::decoder::DecodeMode;
use crate::error::{ProcapError, Result};
use crate::metrics::{bleu4, cider_d, meteor_lite, Scored};
use crate::model::{Context, ProCapModel, Task};
use crate::vision::{downsample_gt_mask, mask_iou};
use crate::vocab::normalize_words;

/// Subset that pools every record.
pub const ALL: &str = "all";

pub const METRICS: [&str; 3] = ["B@4", "M-lite", "C"];

pub const METRIC_NOTES: &str = "B@4 is corpus-level BLEU over n = 1..4 with closest-reference brevity penalty. \
C is CIDEr-D (sigma 6, clipped counts, x10, IDF over the task's full reference corpus). \
M-lite is an exact-unigram METEOR approximation without stemming or synonyms; it is not official METEOR. \
SPICE is not computed.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub generated_scene: String,
    pub generated_proj: String,
    pub gt_scene: Vec<String>,
    pub gt_proj: Vec<String>,
    pub subset: String,
}

impl EvalRecord {
    pub fn generated(&self, task: Task) -> &str {
        match task {
            Task::Scene => &self.generated_scene,
            Task::Projection => &self.generated_proj,
        }
    }

    pub fn gt(&self, task: Task) -> &[String] {
        match task {
            Task::Scene => &self.gt_scene,
            Task::Projection => &self.gt_proj,
        }
    }
}

/// Scores of one (task, subset) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellScores {
    #[serde(rename = "B@4")]
    pub bleu4: f64,
    #[serde(rename = "M-lite")]
    pub meteor_lite: f64,
    #[serde(rename = "C")]
    pub cider_d: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: String,
    pub kb: String,
    pub manifest: String,
    pub metric_notes: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    /// task -> subset -> scores.
    pub results: BTreeMap<String, BTreeMap<String, CellScores>>,
}

impl EvalReport {
    pub fn cell(&self, task: Task, subset: &str) -> Option<&CellScores> {
        self.results.get(task.as_str())?.get(subset)
    }

    /// Number of (task, metric, subset) values.
    pub fn cell_count(&self) -> usize {
        self.results.values().map(|m| m.len() * METRICS.len()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: one row per subset, scene and projection
    /// metric columns side by side.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let subsets: Vec<&String> = self.results.values().flat_map(|m| m.keys()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        writeln!(out, "{:<12} | {:^26} | {:^26}", "", "Scene", "Projection").unwrap();
        writeln!(out, "{:<12} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}", "subset", "B@4", "M-lite", "C", "B@4", "M-lite", "C").unwrap();
        for s in subsets {
            let mut row = format!("{s:<12} |");
            for task in Task::BOTH {
                match self.cell(task, s) {
                    Some(c) => write!(row, " {:>8.4} {:>8.4} {:>8.4} |", c.bleu4, c.meteor_lite, c.cider_d).unwrap(),
                    None => write!(row, " {:>8} {:>8} {:>8} |", "-", "-", "-").unwrap(),
                }
            }
            writeln!(out, "{}", row.trim_end_matches(" |")).unwrap();
        }
        writeln!(out, "note: {METRIC_NOTES}").unwrap();
        out
    }
}

/// Score records. Each task reads only its own hypotheses and ground truth.
pub fn score_records(records: &[EvalRecord], meta: ReportMeta) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(ProcapError::EmptyEvalSplit);
    }
    let mut results = BTreeMap::new();
    for task in Task::BOTH {
        let scored: Vec<Scored> = records.iter().map(|r| Scored::from_text(r.generated(task), r.gt(task))).collect();
        if scored.iter().any(|s| s.refs.is_empty()) {
            return Err(ProcapError::SchemaViolation(format!("{} ground truth missing for a record", task.as_str())));
        }
        let (_, cider) = cider_d(&scored)?;
        let mut subsets: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            subsets.entry(ALL.to_string()).or_default().push(i);
            if r.subset != ALL {
                subsets.entry(r.subset.clone()).or_default().push(i);
            }
        }
        let mut cells = BTreeMap::new();
        for (name, idx) in subsets {
            let part: Vec<Scored> = idx.iter().map(|&i| scored[i].clone()).collect();
            let n = idx.len() as f64;
            cells.insert(
                name,
                CellScores {
                    bleu4: bleu4(&part)?,
                    meteor_lite: idx.iter().map(|&i| meteor_lite(&scored[i].hyp, &scored[i].refs)).sum::<f64>() / n,
                    cider_d: idx.iter().map(|&i| cider[i]).sum::<f64>() / n,
                    n: idx.len(),
                },
            );
        }
        results.insert(task.as_str().to_string(), cells);
    }
    Ok(EvalReport { meta, results })
}

/// Whether `generated` equals some reference after normalization.
pub fn exact_match(generated: &str, refs: &[String]) -> bool {
    let g = normalize_words(generated);
    refs.iter().any(|r| normalize_words(r) == g)
}

/// Fraction of records whose `task` caption exactly matches a reference.
pub fn exact_match_rate(records: &[EvalRecord], task: Task) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| exact_match(r.generated(task), r.gt(task))).count() as f64 / records.len() as f64
}

/// Per-record pipeline output beyond the captions.
#[derive(Clone, Debug, PartialEq)]
pub struct RunExtras {
    pub mask_iou: f64,
    pub retrieved: Vec<String>,
}

/// Caption every sample of `split` greedily and collect records. Subset tag
/// is the scene id.
pub fn generate_records(model: &ProCapModel, data: &Dataset, split: Split, ctx: Context) -> Result<(Vec<EvalRecord>, Vec<RunExtras>)> {
    let grid = model.config.refined_dims();
    let mut records = Vec::new();
    let mut extras = Vec::new();
    for s in data.split(split) {
        let out = model.caption(&s.composite_image, ctx, DecodeMode::Greedy)?;
        let (gt_scene, gt_proj) = data.captions(s);
        let target = downsample_gt_mask(&s.gt_mask_pixel, grid)?;
        extras.push(RunExtras { mask_iou: mask_iou(&out.mask, &target), retrieved: out.retrieved.names.clone() });
        records.push(EvalRecord {
            sample_id: s.sample_id.clone(),
            generated_scene: out.scene,
            generated_proj: out.projection,
            gt_scene: gt_scene.to_vec(),
            gt_proj: gt_proj.to_vec(),
            subset: s.scene_id.clone(),
        });
    }
    if records.is_empty() {
        return Err(ProcapError::EmptyEvalSplit);
    }
    Ok((records, extras))
}

/// Full protocol: generate, then score each task independently.
pub fn evaluate_dual(model: &ProCapModel, data: &Dataset, split: Split, ctx: Context, meta: ReportMeta) -> Result<(EvalReport, Vec<EvalRecord>)> {
    let (records, _) = generate_records(model, data, split, ctx)?;
    let report = score_records(&records, meta)?;
    Ok((report, records))
}
