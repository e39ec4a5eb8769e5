//! Query-token encoders (scene, projection, knowledge) and prompt assembly.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::nn::{canonicalize_rows, Attention, FeedForward, LayerNorm, Linear};
use crate::params::{normal_init, ParamId, ParamStore};

#[derive(Clone, Debug)]
struct Block {
    self_attn: Attention,
    ln1: LayerNorm,
    cross_attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, heads: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, dim, heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), dim, kv_dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, kv: Var) -> Var {
        let a = self.self_attn.forward(g, x, x, false);
        let x = g.add(x, a);
        let x = self.ln1.forward(g, x);
        let c = self.cross_attn.forward(g, x, kv, false);
        let x = g.add(x, c);
        let x = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        self.ln3.forward(g, x)
    }
}

/// Hyper-parameters shared by every query encoder.
#[derive(Clone, Copy, Debug)]
pub struct QFormerDims {
    pub queries: usize,
    pub dim: usize,
    pub kv_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

/// Learnable query tokens that cross-attend to an unordered set of feature
/// tokens and return a fixed number of rows.
#[derive(Clone, Debug)]
pub struct QFormer {
    pub tokens: ParamId,
    blocks: Vec<Block>,
}

impl QFormer {
    pub fn new(store: &mut ParamStore, name: &str, d: QFormerDims, rng: &mut ChaCha8Rng) -> Self {
        let tokens = store.register(format!("{name}.tokens"), normal_init(&[d.queries, d.dim], 1.0, rng));
        let blocks = (0..d.layers).map(|i| Block::new(store, &format!("{name}.block{i}"), d.dim, d.kv_dim, d.heads, d.ffn, rng)).collect();
        Self { tokens, blocks }
    }

    /// `features: [N, kv_dim]` -> `[L, dim]`. Feature rows are put into a
    /// canonical order first, so any permutation gives identical output.
    pub fn forward(&self, g: &mut Graph, features: Var) -> Var {
        let kv = canonicalize_rows(g, features);
        let mut x = g.param(self.tokens);
        for b in &self.blocks {
            x = b.forward(g, x, kv);
        }
        x
    }
}

/// Distills retrieved names, together with the projection queries, into a
/// fixed-length knowledge query set.
#[derive(Clone, Debug)]
pub struct KnowledgeQFormer {
    pub name_proj: Linear,
    pub inner: QFormer,
}

impl KnowledgeQFormer {
    pub fn new(store: &mut ParamStore, name: &str, name_dim: usize, d: QFormerDims, rng: &mut ChaCha8Rng) -> Self {
        let name_proj = Linear::new(store, &format!("{name}.name_proj"), name_dim, d.dim, rng);
        let inner = QFormer::new(store, name, QFormerDims { kv_dim: d.dim, ..d }, rng);
        Self { name_proj, inner }
    }

    /// `names: [K, name_dim]` pooled name embeddings, `q_p: [L_q, dim]`.
    pub fn forward(&self, g: &mut Graph, names: Var, q_p: Var) -> Var {
        let n = self.name_proj.forward(g, names);
        let kv = g.concat_rows(&[n, q_p]);
        self.inner.forward(g, kv)
    }
}

/// `H_s = [e_scene; phi(Q_s)]` and `H_p = [e_proj; phi(Q_p); phi(Q_k)]`.
pub fn build_prompts(g: &mut Graph, phi: &Linear, scene_token: Var, proj_token: Var, q_s: Var, q_p: Var, q_k: Var) -> (Var, Var) {
    let s = phi.forward(g, q_s);
    let p = phi.forward(g, q_p);
    let k = phi.forward(g, q_k);
    let h_s = g.concat_rows(&[scene_token, s]);
    let h_p = g.concat_rows(&[proj_token, p, k]);
    (h_s, h_p)
}
