//! Layer building blocks shared by the query encoders and the decoder.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{canonical_row_order, Graph, Var};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut l = Self::without_bias(store, name, input, output, rng);
        l.b = Some(store.register(format!("{name}.b"), Tensor::zeros(&[output])));
        l
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { w: store.register(format!("{name}.w"), normal_init(&[input, output], 1.0 / (input as f64).sqrt(), rng)), b: None }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

/// Multi-head scaled dot-product attention. Keys and values may come from a
/// space of a different width than the queries. The key projection has no
/// bias: it would shift every score of a query equally and cancel in the
/// softmax.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::without_bias(store, &format!("{name}.k"), kv_dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// `queries: [Lq, dim]`, `context: [Lk, kv_dim]`. With `causal`, query
    /// row `i` only sees context rows `<= i`.
    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var, causal: bool) -> Var {
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let dim = g.shape(q)[1];
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh, false, true);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s, causal.then_some(0));
            outs.push(g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Reorder the rows of `x` into canonical (lexicographic) order so that an
/// unordered key/value set yields bitwise-identical attention output
/// regardless of how its rows were arranged.
pub fn canonicalize_rows(g: &mut Graph, x: Var) -> Var {
    let order = canonical_row_order(g.value(x));
    if order.iter().enumerate().all(|(i, &j)| i == j) {
        return x;
    }
    g.gather_rows(x, &order)
}
