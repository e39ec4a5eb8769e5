//! Multi-task objective, learning-rate schedule, AdamW and the training loop.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::compose::Split;
use crate::config::{LossWeights, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{ProcapError, Result};
use crate::image::Image;
use crate::memory::KnowledgeBase;
use crate::model::{Context, ProCapModel};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;
use crate::vision::{downsample_gt_mask, MaskGrid};
use crate::vocab::{normalize_text, TokenSequence};

/// Prediction clamp used by the segmentation loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_p: f64,
    pub l_seg: f64,
    pub total: f64,
}

/// `alpha * l_s + beta * l_p + gamma * l_seg`, summed left to right.
pub fn total_loss(l_s: f64, l_p: f64, l_seg: f64, w: LossWeights) -> Result<LossBreakdown> {
    if !(l_s.is_finite() && l_p.is_finite() && l_seg.is_finite()) {
        return Err(ProcapError::NonFinite(format!("losses l_s={l_s} l_p={l_p} l_seg={l_seg}")));
    }
    let total = w.alpha * l_s + w.beta * l_p + w.gamma * l_seg;
    Ok(LossBreakdown { l_s, l_p, l_seg, total })
}

/// Mean binary cross-entropy between a predicted and a target mask.
pub fn seg_loss(pred: &MaskGrid, target: &MaskGrid) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(ProcapError::DimensionMismatch(format!("pred {:?} vs target {:?}", pred.dims(), target.dims())));
    }
    let mut g = Graph::detached();
    let p = g.constant(pred.grid.clone());
    let l = g.bce(p, target.grid.clone(), BCE_EPS);
    Ok(g.value(l).item())
}

/// Linear warmup from `lr_warmup_start` to `lr_init`, then cosine decay to 0
/// at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig, total_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(ProcapError::StepOutOfRange { step, total: total_steps });
    }
    let warm = cfg.warmup_steps;
    if warm > total_steps {
        return Err(ProcapError::InvalidConfig(format!("warmup_steps ({warm}) exceeds total_steps ({total_steps})")));
    }
    if step < warm {
        let t = step as f64 / warm as f64;
        return Ok(cfg.lr_warmup_start + (cfg.lr_init - cfg.lr_warmup_start) * t);
    }
    if total_steps == warm {
        return Ok(cfg.lr_init);
    }
    let t = (step - warm) as f64 / (total_steps - warm) as f64;
    Ok(cfg.lr_init * 0.5 * (1.0 + (PI * t).cos()))
}

/// AdamW with decoupled weight decay. Decay applies only to tensors of rank
/// two or more; biases, norms and other vectors are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let n = store.len();
        Self { beta1, beta2, eps, weight_decay, m: vec![None; n], v: vec![None; n], t: vec![0; n] }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    /// Update every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        for (id, grad) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
            let p = store.get_mut(id);
            let decay = if p.shape().len() >= 2 { 1.0 - lr * self.weight_decay } else { 1.0 };
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
                *pv = *pv * decay - lr * update;
            }
        }
    }
}

/// One training example with everything precomputed that does not depend
/// on the parameters.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub sample_id: String,
    pub scene_id: String,
    pub image: Image,
    pub target: MaskGrid,
    pub scene_captions: Vec<TokenSequence>,
    pub proj_captions: Vec<TokenSequence>,
}

pub fn prepare_items(model: &ProCapModel, data: &Dataset, split: Split) -> Result<Vec<TrainItem>> {
    let grid = model.config.refined_dims();
    data.split(split)
        .map(|s| {
            let (scene, proj) = data.captions(s);
            let tok = |c: &[String]| c.iter().map(|t| model.vocab.tokenize(t, model.config.max_len)).collect();
            Ok(TrainItem {
                sample_id: s.sample_id.clone(),
                scene_id: s.scene_id.clone(),
                image: s.composite_image.clone(),
                target: downsample_gt_mask(&s.gt_mask_pixel, grid)?,
                scene_captions: tok(scene),
                proj_captions: tok(proj),
            })
        })
        .collect()
}

/// Training-split captions, normalized, de-duplicated and sorted.
pub fn caption_corpus(data: &Dataset) -> Vec<String> {
    let mut out: Vec<String> = data
        .split(Split::Train)
        .flat_map(|s| {
            let (a, b) = data.captions(s);
            a.iter().chain(b).map(|c| normalize_text(c)).collect::<Vec<_>>()
        })
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Loss graph for one item. `pass` selects which ground-truth caption is
/// used when several are available.
pub fn item_losses(
    model: &ProCapModel,
    g: &mut Graph,
    item: &TrainItem,
    pass: usize,
    ctx: Context,
    cfg: &TrainConfig,
) -> Result<(Var, [Var; 3])> {
    let pool = cfg.teacher_force_mask.then_some(&item.target);
    let f = model.forward(g, &item.image, ctx, pool)?;
    let s = &item.scene_captions[pass % item.scene_captions.len()];
    let p = &item.proj_captions[pass % item.proj_captions.len()];
    let l_s = model.decoder.caption_nll(g, Some(f.h_s), s)?;
    let l_p = model.decoder.caption_nll(g, Some(f.h_p), p)?;
    let l_seg = g.bce(f.mask, item.target.grid.clone(), BCE_EPS);
    let w = cfg.loss_weights;
    let total = g.weighted_sum(&[(l_s, w.alpha), (l_p, w.beta), (l_seg, w.gamma)]);
    Ok((total, [l_s, l_p, l_seg]))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

/// Stateful trainer: owns the optimizer and the data order.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub total_steps: usize,
    pub step: usize,
    items: &'a [TrainItem],
    kb: Option<&'a KnowledgeBase>,
    opt: AdamW,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &mut ProCapModel, items: &'a [TrainItem], kb: Option<&'a KnowledgeBase>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if items.is_empty() {
            return Err(ProcapError::EmptyCorpus("no training samples".into()));
        }
        if kb.is_none() && !cfg.null_retrieval {
            return Err(ProcapError::InvalidConfig("training needs a knowledge base unless null_retrieval is set".into()));
        }
        let total_steps = cfg.resolved_total_steps(items.len());
        lr_schedule(0, cfg, total_steps)?;
        for id in model.decoder_params() {
            model.store.set_trainable(id, !cfg.freeze_decoder);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            total_steps,
            step: 0,
            items,
            kb,
            opt: AdamW::from_config(&model.store, cfg),
            rng,
            order,
            cursor: 0,
            epoch: 0,
        })
    }

    fn next_batch(&mut self) -> Vec<(usize, usize)> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size.min(self.items.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            batch.push((self.order[self.cursor], self.epoch));
            self.cursor += 1;
        }
        batch
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps
    }

    /// One optimizer step over the next batch.
    pub fn step(&mut self, model: &mut ProCapModel) -> Result<StepLog> {
        let lr = lr_schedule(self.step, &self.cfg, self.total_steps)?;
        let ctx = match (self.cfg.null_retrieval, self.kb) {
            (false, Some(kb)) => Context::Knowledge(kb),
            _ => Context::Null,
        };
        let batch = self.next_batch();
        let mut grads = Gradients::new(model.store.len());
        let mut sums = [0.0; 3];
        for &(i, pass) in &batch {
            let g_store = &model.store;
            let mut g = Graph::new(g_store);
            let (total, parts) = item_losses(model, &mut g, &self.items[i], pass, ctx, &self.cfg)?;
            for (s, v) in sums.iter_mut().zip(parts) {
                *s += g.value(v).item();
            }
            let item_total = g.value(total).item();
            if !item_total.is_finite() {
                return Err(ProcapError::NonFiniteLoss {
                    step: self.step,
                    detail: format!("sample {} produced total {item_total}", self.items[i].sample_id),
                });
            }
            grads.merge(g.backward(total).params());
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        let [l_s, l_p, l_seg] = sums.map(|s| s / n);
        let losses = total_loss(l_s, l_p, l_seg, self.cfg.loss_weights)
            .map_err(|e| ProcapError::NonFiniteLoss { step: self.step, detail: e.to_string() })?;
        self.opt.step(&mut model.store, &grads, lr);
        let log = StepLog { step: self.step, lr, losses };
        self.step += 1;
        Ok(log)
    }
}

/// Run the whole schedule, calling `on_step` after every update.
pub fn train(
    model: &mut ProCapModel,
    items: &[TrainItem],
    kb: Option<&KnowledgeBase>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    let mut trainer = Trainer::new(model, items, kb, cfg)?;
    let mut logs = Vec::with_capacity(trainer.total_steps);
    while !trainer.finished() {
        let log = trainer.step(model)?;
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// CSV with columns `step,lr,l_s,l_p,l_seg,total`.
pub fn loss_log_csv(logs: &[StepLog]) -> String {
    let mut out = String::from("step,lr,l_s,l_p,l_seg,total\n");
    for l in logs {
        let b = l.losses;
        writeln!(out, "{},{:e},{},{},{},{}", l.step, l.lr, b.l_s, b.l_p, b.l_seg, b.total).unwrap();
    }
    out
}

pub fn write_loss_log(path: &Path, logs: &[StepLog]) -> Result<()> {
    std::fs::write(path, loss_log_csv(logs)).map_err(|e| ProcapError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

fn corpus_lm_loss(model: &ProCapModel, seqs: &[TokenSequence]) -> Result<f64> {
    let mut sum = 0.0;
    for s in seqs {
        let mut g = Graph::new(&model.store);
        let l = model.decoder.caption_nll(&mut g, None, s)?;
        sum += g.value(l).item();
    }
    Ok(sum / seqs.len() as f64)
}

/// Next-token language modelling on caption text alone (no prompt rows).
/// Only decoder parameters receive updates.
pub fn pretrain_decoder(model: &mut ProCapModel, captions: &[String], epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Result<PretrainReport> {
    if captions.is_empty() {
        return Err(ProcapError::EmptyCorpus("no captions for decoder pretraining".into()));
    }
    let seqs: Vec<TokenSequence> = captions.iter().map(|c| model.vocab.tokenize(c, model.config.max_len)).collect();
    let initial_loss = corpus_lm_loss(model, &seqs)?;
    let mut opt = AdamW::new(&model.store, 0.9, 0.99, 1e-8, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut steps = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size.max(1)) {
            let mut grads = Gradients::new(model.store.len());
            for &i in chunk {
                let mut g = Graph::new(&model.store);
                let l = model.decoder.caption_nll(&mut g, None, &seqs[i])?;
                if !g.value(l).item().is_finite() {
                    return Err(ProcapError::NonFiniteLoss { step: steps, detail: format!("caption {:?}", captions[i]) });
                }
                grads.merge(g.backward(l).params());
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.step(&mut model.store, &grads, lr);
            steps += 1;
        }
    }
    let final_loss = corpus_lm_loss(model, &seqs)?;
    Ok(PretrainReport { initial_loss, final_loss, steps })
}
