//! Run configuration shared by every subcommand.
//!
//! Every field has a default, and unknown keys are rejected when a config is
//! parsed, so a serialized [`RunConfig`] is a complete record of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compose::Pattern;
use crate::error::{ProcapError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, synth: SynthConfig::default(), model: ModelConfig::default(), train: TrainConfig::default() }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| ProcapError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ProcapError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }
}

/// Architecture dimensions. Defaults describe the desk-scale model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input image size `[H, W]`.
    pub canvas: [usize; 2],
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Seed of the frozen patch encoder.
    pub encoder_seed: u64,
    /// Channels after the first transposed convolution.
    pub refine_hidden: usize,
    /// Channels of the refined grid.
    pub refine_channels: usize,
    pub seg_hidden: usize,
    pub query_dim: usize,
    pub scene_queries: usize,
    pub knowledge_queries: usize,
    pub qformer_layers: usize,
    pub qformer_heads: usize,
    pub qformer_ffn: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_ffn: usize,
    /// Maximum token sequence length including `<bos>` and `<eos>`.
    pub max_len: usize,
    /// Number of retrieved object names.
    pub top_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            canvas: [64, 64],
            patch_size: 8,
            embed_dim: 64,
            encoder_seed: 7,
            refine_hidden: 32,
            refine_channels: 32,
            seg_hidden: 16,
            query_dim: 64,
            scene_queries: 8,
            knowledge_queries: 8,
            qformer_layers: 2,
            qformer_heads: 4,
            qformer_ffn: 128,
            decoder_dim: 64,
            decoder_layers: 2,
            decoder_heads: 4,
            decoder_ffn: 128,
            max_len: 32,
            top_k: 9,
        }
    }
}

impl ModelConfig {
    pub fn coarse_dims(&self) -> [usize; 2] {
        [self.canvas[0] / self.patch_size, self.canvas[1] / self.patch_size]
    }

    pub fn refined_dims(&self) -> [usize; 2] {
        let [h, w] = self.coarse_dims();
        [4 * h, 4 * w]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ProcapError::InvalidConfig(m.to_string()));
        if self.patch_size == 0 || self.canvas[0] % self.patch_size != 0 || self.canvas[1] % self.patch_size != 0 {
            return bad("canvas must be divisible by patch_size");
        }
        let [rh, rw] = self.refined_dims();
        if self.canvas[0] % rh != 0 || self.canvas[1] % rw != 0 {
            return bad("canvas must be divisible by the refined grid (patch_size must be a multiple of 4)");
        }
        if self.query_dim % self.qformer_heads.max(1) != 0 || self.qformer_heads == 0 {
            return bad("query_dim must be divisible by qformer_heads");
        }
        if self.decoder_dim % self.decoder_heads.max(1) != 0 || self.decoder_heads == 0 {
            return bad("decoder_dim must be divisible by decoder_heads");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.embed_dim % 4 != 0 {
            return bad("embed_dim must be a multiple of 4 (2-D sinusoidal positions)");
        }
        Ok(())
    }
}

/// Weights of the multi-task objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5, gamma: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_warmup_start: f64,
    pub warmup_steps: usize,
    /// `None` trains for a single epoch: `ceil(train_size / batch_size)` steps.
    pub total_steps: Option<usize>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_decoder: bool,
    /// Gate projection features with the ground-truth mask instead of the
    /// predicted one during training.
    pub teacher_force_mask: bool,
    /// Replace every retrieved name with the null token.
    pub null_retrieval: bool,
    pub loss_weights: LossWeights,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            lr_warmup_start: 1e-6,
            warmup_steps: 5000,
            total_steps: None,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 8,
            seed: 0,
            freeze_decoder: false,
            teacher_force_mask: false,
            null_retrieval: false,
            loss_weights: LossWeights::default(),
            pretrain_epochs: 30,
            pretrain_lr: 1e-3,
        }
    }
}

impl TrainConfig {
    /// Short-schedule preset for overfitting the small synthetic corpus on a
    /// CPU: same optimizer and schedule shape, shorter warmup, larger rate.
    pub fn overfit() -> Self {
        Self {
            lr_init: 2e-3,
            lr_warmup_start: 1e-5,
            warmup_steps: 100,
            total_steps: Some(1500),
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn resolved_total_steps(&self, train_size: usize) -> usize {
        self.total_steps.unwrap_or_else(|| train_size.div_ceil(self.batch_size.max(1)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProcapError::InvalidConfig(m));
        if !(self.lr_init > 0.0 && self.lr_warmup_start > 0.0 && self.pretrain_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let w = self.loss_weights;
        if !(w.alpha >= 0.0 && w.beta >= 0.0 && w.gamma >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if let Some(total) = self.total_steps {
            if self.warmup_steps > total {
                return bad(format!("warmup_steps ({}) exceeds total_steps ({total})", self.warmup_steps));
            }
        }
        Ok(())
    }
}

/// Ranges from which per-sample blend parameters are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendRanges {
    pub gain: [f64; 2],
    pub gamma: [f64; 2],
    pub noise_sigma: [f64; 2],
    /// Side length of the projected quad as a fraction of the canvas.
    pub coverage: [f64; 2],
    /// Corner perturbation as a fraction of the quad size.
    pub corner_jitter: f64,
}

impl Default for BlendRanges {
    fn default() -> Self {
        Self { gain: [0.7, 1.0], gamma: [0.8, 1.25], noise_sigma: [0.0, 0.01], coverage: [0.45, 0.75], corner_jitter: 0.08 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: String,
    pub captions: Vec<String>,
    /// PNG path (relative to the config file) or a procedural pattern.
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub pattern: Option<Pattern>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub id: String,
    pub captions: Vec<String>,
    pub name: String,
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub pattern: Option<Pattern>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub canvas: [usize; 2],
    pub scenes: Vec<SceneEntry>,
    pub sources: Vec<SourceEntry>,
    pub draws_per_pair: usize,
    pub eval_fraction: f64,
    pub blend: BlendRanges,
}

impl Default for SynthConfig {
    fn default() -> Self {
        crate::compose::builtin_corpus(4, 8)
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eval_fraction) {
            return Err(ProcapError::InvalidConfig("eval_fraction must lie in [0, 1]".into()));
        }
        let b = &self.blend;
        if b.gamma[0] <= 0.0 || b.gain[0] < 0.0 || b.noise_sigma[0] < 0.0 || b.coverage[0] <= 0.0 || b.coverage[1] > 1.0 {
            return Err(ProcapError::InvalidConfig("blend ranges out of bounds".into()));
        }
        Ok(())
    }
}
