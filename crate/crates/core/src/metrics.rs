//! Caption metrics: corpus BLEU@4, CIDEr-D and an exact-match METEOR
//! approximation. Inputs are token lists; use
//! [`normalize_words`](crate::vocab::normalize_words) to produce them.

use std::collections::HashMap;

use crate::error::{ProcapError, Result};

pub type Tokens = Vec<String>;

/// One hypothesis and its reference set.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub hyp: Tokens,
    pub refs: Vec<Tokens>,
}

impl Scored {
    pub fn from_text(hyp: &str, refs: &[impl AsRef<str>]) -> Self {
        use crate::vocab::normalize_words;
        Self { hyp: normalize_words(hyp), refs: refs.iter().map(|r| normalize_words(r.as_ref())).collect() }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with n = 1..4, uniform weights and a brevity penalty
/// against the closest reference length (ties go to the shorter one).
pub fn bleu4(corpus: &[Scored]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(ProcapError::EmptyCorpus("BLEU needs at least one hypothesis".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for item in corpus {
        let h = item.hyp.len();
        hyp_len += h;
        ref_len += item
            .refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&r| (r.abs_diff(h), r))
            .unwrap_or(0);
        for n in 1..=4 {
            let hc = ngram_counts(&item.hyp, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &item.refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hc {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.saturating_sub(n - 1);
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(bp * log_p.exp())
}

/// Gaussian length-penalty width of CIDEr-D.
pub const CIDER_SIGMA: f64 = 6.0;

/// CIDEr-D. Returns the corpus mean and the per-sample scores. Document
/// frequencies come from the reference sets of the whole corpus.
pub fn cider_d(corpus: &[Scored]) -> Result<(f64, Vec<f64>)> {
    if corpus.len() < 2 {
        return Err(ProcapError::CorpusTooSmall(format!("CIDEr-D needs at least 2 samples, got {}", corpus.len())));
    }
    let mut df: HashMap<&[String], f64> = HashMap::new();
    for item in corpus {
        let mut seen: std::collections::HashSet<&[String]> = Default::default();
        for r in &item.refs {
            for n in 1..=4 {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    // TF-IDF vector for one n-gram order plus its L2 norm.
    let vec_of = |tokens: &'_ [String], n: usize| {
        let counts = ngram_counts(tokens, n);
        let mut v: HashMap<Vec<String>, f64> = HashMap::new();
        let mut norm = 0.0;
        for (g, c) in counts {
            let w = c as f64 * (log_n - df.get(g).copied().unwrap_or(0.0).max(1.0).ln());
            norm += w * w;
            v.insert(g.to_vec(), w);
        }
        (v, norm.sqrt())
    };
    let mut scores = Vec::with_capacity(corpus.len());
    for item in corpus {
        let mut per_n = [0.0; 4];
        for n in 1..=4 {
            let (hv, hn) = vec_of(&item.hyp, n);
            for r in &item.refs {
                let (rv, rn) = vec_of(r, n);
                let mut dot = 0.0;
                for (g, &h) in &hv {
                    if let Some(&rw) = rv.get(g) {
                        dot += h.min(rw) * rw;
                    }
                }
                let cos = if hn != 0.0 && rn != 0.0 { dot / (hn * rn) } else { 0.0 };
                let delta = item.hyp.len() as f64 - r.len() as f64;
                per_n[n - 1] += cos * (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            }
        }
        let mean_n = per_n.iter().sum::<f64>() / 4.0;
        scores.push(10.0 * mean_n / item.refs.len() as f64);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((mean, scores))
}

pub const METEOR_ALPHA: f64 = 0.9;

/// Alignment of a hypothesis to one reference: most matches, then fewest
/// chunks (runs of adjacent words in both strings).
pub fn align(hyp: &[String], reference: &[String]) -> (usize, usize) {
    assert!(reference.len() <= 128, "reference longer than 128 tokens");
    type Memo = HashMap<(usize, u128, usize), (usize, usize)>;
    // `prev` is the reference index matched by hyp[i - 1], or usize::MAX.
    fn go(i: usize, used: u128, prev: usize, hyp: &[String], r: &[String], memo: &mut Memo) -> (usize, usize) {
        if i == hyp.len() {
            return (0, 0);
        }
        if let Some(&v) = memo.get(&(i, used, prev)) {
            return v;
        }
        let better = |a: (usize, usize), b: (usize, usize)| if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) { a } else { b };
        let mut best = go(i + 1, used, usize::MAX, hyp, r, memo);
        for (j, w) in r.iter().enumerate() {
            if used & (1 << j) == 0 && *w == hyp[i] {
                let (m, c) = go(i + 1, used | (1 << j), j, hyp, r, memo);
                let new_chunk = usize::from(prev == usize::MAX || prev + 1 != j);
                best = better((m + 1, c + new_chunk), best);
            }
        }
        memo.insert((i, used, prev), best);
        best
    }
    go(0, 0, usize::MAX, hyp, reference, &mut HashMap::new())
}

fn meteor_single(hyp: &[String], reference: &[String]) -> f64 {
    let (m, ch) = align(hyp, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = 0.5 * (ch as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

/// Exact-unigram METEOR approximation; the best reference wins.
pub fn meteor_lite(hyp: &[String], refs: &[Tokens]) -> f64 {
    refs.iter().map(|r| meteor_single(hyp, r)).fold(0.0, f64::max)
}
