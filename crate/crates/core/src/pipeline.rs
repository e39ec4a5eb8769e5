//! End-to-end steps shared by the command line and the integration tests.
//! Every artifact written here carries the resolved [`RunConfig`].

use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, round_model, save_checkpoint};
use crate::compose::Split;
use crate::config::RunConfig;
use crate::dataset::{load_dataset, synth_dataset, Dataset};
use crate::error::{ProcapError, Result};
use crate::eval::{generate_records, score_records, EvalRecord, EvalReport, ReportMeta, RunExtras, METRIC_NOTES};
use crate::image::Image;
use crate::memory::{load_kb, save_kb, KnowledgeBase};
use crate::model::{Context, ProCapModel};
use crate::train::{caption_corpus, prepare_items, pretrain_decoder, train, write_loss_log, PretrainReport, StepLog};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const RUN_FILE: &str = "run.json";

fn provenance(run: &RunConfig) -> serde_json::Value {
    serde_json::to_value(run).expect("config serializes")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ProcapError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| ProcapError::io(path, e))
}

/// Render the synthetic corpus of `run` into `out_dir`. Relative image paths
/// in the config resolve against `base_dir`.
pub fn synth(run: &RunConfig, out_dir: &Path, base_dir: &Path) -> Result<PathBuf> {
    run.validate()?;
    create_dir(out_dir)?;
    synth_dataset(&run.synth, run.seed, out_dir, base_dir, Some(provenance(run)))
}

/// Fresh model whose vocabulary covers the training captions of `data`.
pub fn init_model(run: &RunConfig, data: &Dataset) -> Result<ProCapModel> {
    let corpus = caption_corpus(data);
    if corpus.is_empty() {
        return Err(ProcapError::EmptyCorpus("training split has no captions".into()));
    }
    let vocab = Vocabulary::build(corpus.iter().map(String::as_str));
    ProCapModel::new(run.model.clone(), vocab, run.seed)
}

/// Language-model warm start of the decoder on the training captions.
pub fn pretrain(run: &RunConfig, model: &mut ProCapModel, data: &Dataset) -> Result<PretrainReport> {
    let t = &run.train;
    pretrain_decoder(model, &caption_corpus(data), t.pretrain_epochs, t.pretrain_lr, t.batch_size, t.seed)
}

/// Clean source images paired with their object names.
pub fn kb_refs(data: &Dataset) -> Vec<(Image, String)> {
    data.sources.iter().map(|s| (s.source_image.clone(), s.object_name.clone())).collect()
}

pub fn build_kb(model: &ProCapModel, data: &Dataset) -> Result<KnowledgeBase> {
    model.build_kb(&kb_refs(data))
}

pub fn write_kb(kb: &KnowledgeBase, path: &Path, run: &RunConfig) -> Result<()> {
    save_kb(kb, path, Some(provenance(run)))
}

pub fn read_kb(path: &Path) -> Result<KnowledgeBase> {
    load_kb(path)
}

pub fn read_dataset(manifest: &Path) -> Result<Dataset> {
    load_dataset(manifest)
}

/// Load a checkpoint together with the configuration it was saved with.
pub fn read_checkpoint(path: &Path) -> Result<(ProCapModel, RunConfig, usize)> {
    let (model, header) = load_checkpoint(path)?;
    Ok((model, header.config, header.step))
}

/// Round to stored precision and write `model.ckpt` into `out_dir`.
pub fn write_checkpoint(model: &mut ProCapModel, run: &RunConfig, step: usize, out_dir: &Path) -> Result<PathBuf> {
    create_dir(out_dir)?;
    round_model(model);
    let path = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&path, model, run, step)?;
    Ok(path)
}

/// Train on the training split, then write the checkpoint, the loss log and
/// a run summary into `out_dir`.
pub fn train_run(
    run: &RunConfig,
    model: &mut ProCapModel,
    data: &Dataset,
    kb: Option<&KnowledgeBase>,
    out_dir: &Path,
    on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    create_dir(out_dir)?;
    let items = prepare_items(model, data, Split::Train)?;
    let logs = train(model, &items, kb, &run.train, on_step)?;
    write_checkpoint(model, run, logs.len(), out_dir)?;
    write_loss_log(&out_dir.join(LOSS_LOG_FILE), &logs)?;
    let summary = serde_json::json!({
        "config": provenance(run),
        "steps": logs.len(),
        "train_samples": items.len(),
        "final": logs.last().map(|l| l.losses),
    });
    write_text(&out_dir.join(RUN_FILE), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(logs)
}

pub struct EvalOutput {
    pub report: EvalReport,
    pub records: Vec<EvalRecord>,
    pub extras: Vec<RunExtras>,
}

/// Greedy dual captioning of `split`, scored per task. `kb = None` runs the
/// null-name ablation.
pub fn evaluate(model: &ProCapModel, run: &RunConfig, data: &Dataset, split: Split, kb: Option<&KnowledgeBase>, meta: ReportMeta) -> Result<EvalOutput> {
    let ctx = kb.map_or(Context::Null, Context::Knowledge);
    let (records, extras) = generate_records(model, data, split, ctx)?;
    let meta = ReportMeta { config: Some(provenance(run)), ..meta };
    let report = score_records(&records, meta)?;
    Ok(EvalOutput { report, records, extras })
}

pub fn report_meta(checkpoint: &Path, kb: &Path, manifest: &Path) -> ReportMeta {
    ReportMeta {
        checkpoint: checkpoint.display().to_string(),
        kb: kb.display().to_string(),
        manifest: manifest.display().to_string(),
        metric_notes: METRIC_NOTES.to_string(),
        config: None,
    }
}

/// Write `report.json` to `path` and the text table beside it (`.txt`).
pub fn write_report(report: &EvalReport, path: &Path) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(path, &report.to_json())?;
    let table = path.with_extension("txt");
    write_text(&table, &report.table())?;
    Ok(table)
}
