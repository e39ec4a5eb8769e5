//! Small causal transformer decoder conditioned on prefix embeddings.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{ProcapError, Result};
use crate::nn::{Attention, FeedForward, LayerNorm};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vocab::{TokenSequence, Vocabulary, BOS, EOS, NULL, PAD, PROJ, SCENE};

/// Tokens that generation never emits.
const BANNED: [usize; 5] = [PAD, BOS, NULL, SCENE, PROJ];

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

/// Pre-norm decoder. Prompt rows come first and carry no position
/// embedding; text positions are numbered from `<bos>` = 0. The output
/// projection is tied to the token embedding table.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
    max_len: usize,
    dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl Decoder {
    pub const PREFIX: &'static str = "decoder";

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        ffn: usize,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let p = Self::PREFIX;
        let tok_emb = store.register(format!("{p}.tok_emb"), normal_init(&[vocab_size, dim], 0.1, rng));
        let pos_emb = store.register(format!("{p}.pos_emb"), normal_init(&[max_len, dim], 0.1, rng));
        let layers = (0..layers)
            .map(|i| DecoderLayer {
                ln1: LayerNorm::new(store, &format!("{p}.layer{i}.ln1"), dim),
                attn: Attention::new(store, &format!("{p}.layer{i}.attn"), dim, dim, heads, rng),
                ln2: LayerNorm::new(store, &format!("{p}.layer{i}.ln2"), dim),
                ffn: FeedForward::new(store, &format!("{p}.layer{i}.ffn"), dim, ffn, rng),
            })
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{p}.ln_f"), dim);
        Self { tok_emb, pos_emb, layers, ln_f, max_len, dim }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embedding rows for `ids` (no position added).
    pub fn embed(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let table = g.param(self.tok_emb);
        g.gather_rows(table, ids)
    }

    /// One pooled embedding row per name: mean of its word embeddings, or
    /// the `<null>` embedding for the empty name.
    pub fn name_embeddings(&self, g: &mut Graph, vocab: &Vocabulary, names: &[String]) -> Var {
        let rows: Vec<Var> = names
            .iter()
            .map(|n| {
                let e = self.embed(g, &vocab.name_ids(n));
                g.mean_rows(e)
            })
            .collect();
        g.concat_rows(&rows)
    }

    /// Next-token logits `[ids.len(), V]` for every text position.
    pub fn logits(&self, g: &mut Graph, prompt: Option<Var>, ids: &[usize]) -> Var {
        assert!(!ids.is_empty() && ids.len() <= self.max_len, "decoder input length {} outside 1..={}", ids.len(), self.max_len);
        let tok = self.embed(g, ids);
        let pos_table = g.param(self.pos_emb);
        let pos = g.slice_rows(pos_table, 0, ids.len());
        let text = g.add(tok, pos);
        let (mut x, p) = match prompt {
            Some(p) => {
                let rows = g.shape(p)[0];
                (g.concat_rows(&[p, text]), rows)
            }
            None => (text, 0),
        };
        for layer in &self.layers {
            let h = layer.ln1.forward(g, x);
            let a = layer.attn.forward(g, h, h, true);
            x = g.add(x, a);
            let h = layer.ln2.forward(g, x);
            let f = layer.ffn.forward(g, h);
            x = g.add(x, f);
        }
        let x = if p > 0 { g.slice_rows(x, p, ids.len()) } else { x };
        let x = self.ln_f.forward(g, x);
        let table = g.param(self.tok_emb);
        g.matmul_t(x, table, false, true)
    }

    /// Teacher-forced mean negative log-likelihood of `gt` after `prompt`.
    /// Trailing `<pad>` ids are dropped; interior ones are not scored.
    pub fn caption_nll(&self, g: &mut Graph, prompt: Option<Var>, gt: &TokenSequence) -> Result<Var> {
        let end = gt.ids.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
        let ids = &gt.ids[..end];
        if ids.len() < 2 {
            return Err(ProcapError::EmptySequence);
        }
        if ids.len() - 1 > self.max_len {
            return Err(ProcapError::DimensionMismatch(format!("sequence of {} ids exceeds max length {}", ids.len(), self.max_len)));
        }
        let targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| (t != PAD).then_some(t)).collect();
        if targets.iter().all(Option::is_none) {
            return Err(ProcapError::EmptySequence);
        }
        let logits = self.logits(g, prompt, &ids[..ids.len() - 1]);
        Ok(g.cross_entropy(logits, targets))
    }

    /// Log-probabilities of the next token after `ids`, with tokens that may
    /// never be generated set to negative infinity.
    fn next_log_probs(&self, store: &ParamStore, prompt: &Tensor, ids: &[usize]) -> Vec<f64> {
        let mut g = Graph::new(store);
        let p = (prompt.rows() > 0).then(|| g.constant(prompt.clone()));
        let logits = self.logits(&mut g, p, ids);
        let lv = g.value(logits);
        let mut row = lv.row(lv.rows() - 1).to_vec();
        for b in BANNED {
            row[b] = f64::NEG_INFINITY;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        row.iter().map(|x| x - lse).collect()
    }

    /// Decode after `prompt` (`[P, D]`, may have zero rows). Returns
    /// `<bos>`, at most `max_len` content tokens, and `<eos>` if emitted.
    pub fn generate(&self, store: &ParamStore, prompt: &Tensor, max_len: usize, mode: DecodeMode) -> TokenSequence {
        let cap = max_len.min(self.max_len - 1);
        match mode {
            DecodeMode::Greedy => self.greedy(store, prompt, cap),
            DecodeMode::Beam(width) => self.beam(store, prompt, cap, width.max(1)),
        }
    }

    fn greedy(&self, store: &ParamStore, prompt: &Tensor, cap: usize) -> TokenSequence {
        let mut ids = vec![BOS];
        loop {
            let lp = self.next_log_probs(store, prompt, &ids);
            let mut best = 0;
            for (i, &v) in lp.iter().enumerate() {
                if v > lp[best] {
                    best = i;
                }
            }
            // Content tokens are capped; only <eos> may follow the cap.
            if best == EOS || ids.len() - 1 >= cap {
                if best == EOS {
                    ids.push(EOS);
                }
                break;
            }
            ids.push(best);
        }
        TokenSequence { ids }
    }

    fn beam(&self, store: &ParamStore, prompt: &Tensor, cap: usize, width: usize) -> TokenSequence {
        #[derive(Clone)]
        struct Hyp {
            ids: Vec<usize>,
            logp: f64,
            done: bool,
        }
        let mean = |h: &Hyp| h.logp / (h.ids.len() - 1) as f64;
        let mut beams = vec![Hyp { ids: vec![BOS], logp: 0.0, done: false }];
        while beams.iter().any(|h| !h.done) {
            let mut next = Vec::new();
            for h in &beams {
                if h.done {
                    next.push(h.clone());
                    continue;
                }
                let lp = self.next_log_probs(store, prompt, &h.ids);
                let content = h.ids.len() - 1;
                for (tok, &v) in lp.iter().enumerate() {
                    if v == f64::NEG_INFINITY || (tok != EOS && content >= cap) {
                        continue;
                    }
                    let mut ids = h.ids.clone();
                    ids.push(tok);
                    next.push(Hyp { ids, logp: h.logp + v, done: tok == EOS });
                }
                if content >= cap {
                    // Out of room: the hypothesis may also end without <eos>.
                    next.push(Hyp { done: true, ..h.clone() });
                }
            }
            next.sort_by(|a, b| {
                let (ma, mb) = (if a.ids.len() > 1 { mean(a) } else { f64::NEG_INFINITY }, if b.ids.len() > 1 { mean(b) } else { f64::NEG_INFINITY });
                mb.total_cmp(&ma).then_with(|| a.ids.cmp(&b.ids))
            });
            next.truncate(width);
            beams = next;
        }
        TokenSequence { ids: beams.swap_remove(0).ids }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autograd::running_mean;
    use crate::gradcheck::{check_inputs, check_params, worst};
    use crate::vocab::UNK;

    fn tiny(vocab: usize) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Decoder::new(&mut store, vocab, 8, 1, 2, 16, 8, &mut rng);
        (store, d)
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let (mut store, d) = tiny(11);
        *store.get_mut(d.tok_emb) = Tensor::zeros(&[11, 8]);
        let mut g = Graph::new(&store);
        let prompt = g.constant(Tensor::full(&[3, 8], 0.3));
        let seq = TokenSequence { ids: vec![BOS, 8, 9, 7, EOS] };
        let nll = d.caption_nll(&mut g, Some(prompt), &seq).unwrap();
        assert_eq!(g.value(nll).item(), (11f64).ln());
    }

    #[test]
    fn trailing_pads_do_not_change_loss() {
        let (store, d) = tiny(12);
        let seq = TokenSequence { ids: vec![BOS, 8, 10, EOS] };
        let prompt = Tensor::from_vec(&[2, 8], (0..16).map(|i| (i as f64 * 0.37).cos()).collect());
        let eval = |s: &TokenSequence| {
            let mut g = Graph::new(&store);
            let p = g.constant(prompt.clone());
            let l = d.caption_nll(&mut g, Some(p), s).unwrap();
            g.value(l).item()
        };
        assert_eq!(eval(&seq), eval(&seq.padded(7)));
        assert!(matches!(
            d.caption_nll(&mut Graph::new(&store), None, &TokenSequence { ids: vec![BOS, PAD] }),
            Err(ProcapError::EmptySequence)
        ));
    }

    #[test]
    fn causal_positions_ignore_later_tokens() {
        let (store, d) = tiny(12);
        let prompt = Tensor::from_vec(&[2, 8], (0..16).map(|i| (i as f64 * 0.11).sin()).collect());
        let per_position = |ids: &[usize]| {
            let mut g = Graph::new(&store);
            let p = g.constant(prompt.clone());
            let l = d.logits(&mut g, Some(p), ids);
            g.value(l).clone()
        };
        let a = per_position(&[BOS, 7, 8, 9]);
        let b = per_position(&[BOS, 7, 11, 10]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn manual_two_token_nll() {
        // One text position with a zero prompt: the logits reduce to the
        // final-norm output dotted with each embedding row.
        let (store, d) = tiny(9);
        let mut g = Graph::new(&store);
        let logits = d.logits(&mut g, None, &[BOS]);
        let row = g.value(logits).row(0).to_vec();
        let nll = d.caption_nll(&mut g, None, &TokenSequence { ids: vec![BOS, 8] }).unwrap();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let manual = -((row[8] - max) - z.ln());
        assert!((g.value(nll).item() - manual).abs() < 1e-10);
        assert_eq!(running_mean([manual]), manual);
    }

    #[test]
    fn generation_is_deterministic_and_capped() {
        let (store, d) = tiny(12);
        let prompt = Tensor::from_vec(&[1, 8], (0..8).map(|i| i as f64 * 0.2).collect());
        let a = d.generate(&store, &prompt, 5, DecodeMode::Greedy);
        assert_eq!(a, d.generate(&store, &prompt, 5, DecodeMode::Greedy));
        let content = a.ids.iter().filter(|&&t| t >= 7 || t == UNK).count();
        assert!(content <= 5);
        let b = d.generate(&store, &prompt, 5, DecodeMode::Beam(3));
        assert_eq!(b.ids[0], BOS);
        assert!(b.ids.len() <= 7);
    }

    #[test]
    fn eos_first_gives_empty_caption() {
        let (mut store, d) = tiny(10);
        // Make <eos> dominate: its embedding aligned with everything else is
        // impossible in general, so push every other row to zero and <eos>
        // far along the final-norm bias.
        let ln_f_beta = store.id("decoder.ln_f.beta").unwrap();
        *store.get_mut(ln_f_beta) = Tensor::full(&[8], 1.0);
        let ln_f_gamma = store.id("decoder.ln_f.gamma").unwrap();
        *store.get_mut(ln_f_gamma) = Tensor::zeros(&[8]);
        let mut table = Tensor::zeros(&[10, 8]);
        table.data_mut()[EOS * 8..EOS * 8 + 8].fill(1.0);
        *store.get_mut(d.tok_emb) = table;
        let seq = d.generate(&store, &Tensor::zeros(&[0, 8]), 10, DecodeMode::Greedy);
        assert_eq!(seq.ids, [BOS, EOS]);
        let vocab = Vocabulary::build(["a b c"]);
        assert_eq!(vocab.detokenize(&seq.ids), "");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, d) = tiny(10);
        let seq = TokenSequence { ids: vec![BOS, 7, 9, 8, EOS] };
        let prompt = Tensor::from_vec(&[2, 8], (0..16).map(|i| (i as f64 * 0.7).sin() * 0.5).collect());
        let ids: Vec<_> = store.ids().collect();
        let report = check_params(&store, &ids, 12, |g| {
            let p = g.constant(prompt.clone());
            d.caption_nll(g, Some(p), &seq).unwrap()
        });
        assert!(worst(&report) < 1e-4, "{report:?}");
        let err = check_inputs(&store, &[prompt.clone()], |g, v| d.caption_nll(g, Some(v[0]), &seq).unwrap());
        assert!(err < 1e-4, "prompt err {err}");
    }
}
