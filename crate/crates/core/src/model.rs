//! The full dual-captioning model: vision front end, query encoders,
//! retrieval, prompt fusion and the caption decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::decoder::{DecodeMode, Decoder};
use crate::error::{ProcapError, Result};
use crate::image::Image;
use crate::memory::{retrieve, KnowledgeBase, RetrievedContext};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::qformer::{build_prompts, KnowledgeQFormer, QFormer, QFormerDims};
use crate::tensor::Tensor;
use crate::vision::{mask_pool_var, FrozenEncoder, MaskGrid, MaskKind, Refiner, SegmentationHead};
use crate::vocab::{Vocabulary, PROJ, SCENE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Scene,
    Projection,
}

impl Task {
    pub const BOTH: [Task; 2] = [Task::Scene, Task::Projection];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Scene => "scene",
            Task::Projection => "projection",
        }
    }
}

/// Where the knowledge branch gets its names from.
#[derive(Clone, Copy, Debug)]
pub enum Context<'a> {
    Knowledge(&'a KnowledgeBase),
    /// Every slot holds the null name (retrieval ablation).
    Null,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Predicted soft mask `[Hf, Wf]`.
    pub mask: Var,
    pub q_s: Var,
    pub q_p: Var,
    pub q_k: Var,
    pub h_s: Var,
    pub h_p: Var,
    pub retrieved: RetrievedContext,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualCaption {
    pub scene: String,
    pub projection: String,
    pub retrieved: RetrievedContext,
    pub mask: MaskGrid,
}

#[derive(Clone, Debug)]
pub struct ProCapModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: FrozenEncoder,
    pub refiner: Refiner,
    pub seg: SegmentationHead,
    pub scene_qf: QFormer,
    pub proj_qf: QFormer,
    pub know_qf: KnowledgeQFormer,
    pub phi: Linear,
    pub decoder: Decoder,
}

impl ProCapModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = FrozenEncoder::new(c.canvas, c.patch_size, c.embed_dim, c.encoder_seed);
        let refiner = Refiner::new(&mut store, "refine", c.embed_dim, c.refine_hidden, c.refine_channels, &mut rng);
        let seg = SegmentationHead::new(&mut store, "seg", c.refine_channels, c.seg_hidden, &mut rng);
        let qf = |queries, kv_dim| QFormerDims {
            queries,
            dim: c.query_dim,
            kv_dim,
            layers: c.qformer_layers,
            heads: c.qformer_heads,
            ffn: c.qformer_ffn,
        };
        let scene_qf = QFormer::new(&mut store, "scene_qf", qf(c.scene_queries, c.embed_dim), &mut rng);
        let proj_qf = QFormer::new(&mut store, "proj_qf", qf(c.scene_queries, c.refine_channels), &mut rng);
        let know_qf = KnowledgeQFormer::new(&mut store, "know_qf", c.decoder_dim, qf(c.knowledge_queries, c.query_dim), &mut rng);
        let phi = Linear::new(&mut store, "phi", c.query_dim, c.decoder_dim, &mut rng);
        let decoder = Decoder::new(
            &mut store,
            vocab.len(),
            c.decoder_dim,
            c.decoder_layers,
            c.decoder_heads,
            c.decoder_ffn,
            c.max_len,
            &mut rng,
        );
        Ok(Self { config, vocab, store, encoder, refiner, seg, scene_qf, proj_qf, know_qf, phi, decoder })
    }

    fn fit_canvas(&self, image: &Image) -> Image {
        let [h, w] = self.config.canvas;
        if image.dims() == [h, w] {
            image.clone()
        } else {
            image.resized(h, w)
        }
    }

    /// Vision front end and the two visual query sets. `pool_mask` replaces
    /// the predicted mask in mask pooling when given.
    pub fn visual(&self, g: &mut Graph, image: &Image, pool_mask: Option<&MaskGrid>) -> Result<(Var, Var, Var)> {
        let coarse = self.encoder.encode(image)?;
        let [gh, gw, c] = coarse.dims();
        let zc = g.constant(coarse.grid);
        let refined = self.refiner.forward(g, zc);
        let mask = self.seg.forward(g, refined);
        let gate = match pool_mask {
            Some(m) => g.constant(m.grid.clone()),
            None => mask,
        };
        let pooled = mask_pool_var(g, refined, gate)?;
        let (rh, rw, rc) = {
            let s = g.shape(pooled);
            (s[0], s[1], s[2])
        };
        let scene_tokens = g.reshape(zc, &[gh * gw, c]);
        let proj_tokens = g.reshape(pooled, &[rh * rw, rc]);
        let q_s = self.scene_qf.forward(g, scene_tokens);
        let q_p = self.proj_qf.forward(g, proj_tokens);
        Ok((mask, q_s, q_p))
    }

    /// Full forward pass up to the two prompts. Retrieval reads the current
    /// value of `Q_p` and is not differentiated.
    pub fn forward(&self, g: &mut Graph, image: &Image, ctx: Context, pool_mask: Option<&MaskGrid>) -> Result<Forward> {
        let (mask, q_s, q_p) = self.visual(g, image, pool_mask)?;
        let retrieved = match ctx {
            Context::Knowledge(kb) => retrieve(g.value(q_p), kb, self.config.top_k)?,
            Context::Null => RetrievedContext::null(self.config.top_k),
        };
        let names = self.decoder.name_embeddings(g, &self.vocab, &retrieved.names);
        let q_k = self.know_qf.forward(g, names, q_p);
        let scene_token = self.decoder.embed(g, &[SCENE]);
        let proj_token = self.decoder.embed(g, &[PROJ]);
        let (h_s, h_p) = build_prompts(g, &self.phi, scene_token, proj_token, q_s, q_p, q_k);
        Ok(Forward { mask, q_s, q_p, q_k, h_s, h_p, retrieved })
    }

    /// `Q_p` of a clean reference image pooled with an all-ones mask.
    pub fn projection_queries(&self, image: &Image) -> Result<Tensor> {
        let image = self.fit_canvas(image);
        let [rh, rw] = self.config.refined_dims();
        let ones = MaskGrid::ones(rh, rw);
        let mut g = Graph::new(&self.store);
        let (_, _, q_p) = self.visual(&mut g, &image, Some(&ones))?;
        Ok(g.value(q_p).clone())
    }

    /// One knowledge-base entry per reference, in order.
    pub fn build_kb(&self, refs: &[(Image, String)]) -> Result<KnowledgeBase> {
        if refs.is_empty() {
            return Err(ProcapError::EmptyRefs);
        }
        let raw = refs
            .iter()
            .map(|(img, name)| {
                let q = self.projection_queries(img)?;
                Ok((name.clone(), crate::memory::query_vector(&q)))
            })
            .collect::<Result<Vec<_>>>()?;
        KnowledgeBase::from_embeddings(self.config.query_dim, raw)
    }

    pub fn predict_mask(&self, image: &Image) -> Result<MaskGrid> {
        let image = self.fit_canvas(image);
        let mut g = Graph::new(&self.store);
        let (mask, _, _) = self.visual(&mut g, &image, None)?;
        Ok(MaskGrid { grid: g.value(mask).clone(), kind: MaskKind::Predicted })
    }

    /// Generate both captions from one forward pass.
    pub fn caption(&self, image: &Image, ctx: Context, mode: DecodeMode) -> Result<DualCaption> {
        let image = self.fit_canvas(image);
        let mut g = Graph::new(&self.store);
        let f = self.forward(&mut g, &image, ctx, None)?;
        let max_len = self.config.max_len;
        let scene = self.decoder.generate(&self.store, g.value(f.h_s), max_len, mode);
        let projection = self.decoder.generate(&self.store, g.value(f.h_p), max_len, mode);
        Ok(DualCaption {
            scene: self.vocab.detokenize(&scene.ids),
            projection: self.vocab.detokenize(&projection.ids),
            retrieved: f.retrieved,
            mask: MaskGrid { grid: g.value(f.mask).clone(), kind: MaskKind::Predicted },
        })
    }

    /// Names of the parameters owned by the decoder.
    pub fn decoder_params(&self) -> Vec<crate::params::ParamId> {
        let prefix = format!("{}.", Decoder::PREFIX);
        self.store.ids().filter(|&id| self.store.entry(id).name.starts_with(&prefix)).collect()
    }
}
