//! Word-level tokenizer and vocabulary.

use std::collections::{BTreeSet, HashMap};

use crate::error::{ProcapError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NULL: usize = 4;
pub const SCENE: usize = 5;
pub const PROJ: usize = 6;

pub const RESERVED: [&str; 7] = ["<pad>", "<bos>", "<eos>", "<unk>", "<null>", "[SCENE]", "[PROJ]"];

/// Lowercase, turn punctuation into spaces and split on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Normalized text: words joined by single spaces.
pub fn normalize_text(text: &str) -> String {
    normalize_words(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by every distinct word of `captions` in
    /// lexicographic order.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = captions.into_iter().flat_map(normalize_words).collect();
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    /// Rebuild from a serialized token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(ProcapError::SchemaViolation("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(ProcapError::SchemaViolation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Word ids of `text` without sentence markers.
    pub fn word_ids(&self, text: &str) -> Vec<usize> {
        normalize_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// `<bos> words <eos>`, dropping trailing words so the result fits in
    /// `max_len` ids.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must leave room for <bos> and <eos>");
        let mut ids = vec![BOS];
        ids.extend(self.word_ids(text).into_iter().take(max_len - 2));
        ids.push(EOS);
        TokenSequence { ids }
    }

    /// Join non-special tokens with single spaces. `<unk>` is kept.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i == UNK || i >= RESERVED.len())
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Ids used to embed a retrieved object name: its words, or `<null>`
    /// for the empty name.
    pub fn name_ids(&self, name: &str) -> Vec<usize> {
        let ids = self.word_ids(name);
        if ids.is_empty() {
            vec![NULL]
        } else {
            ids
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    /// Append `<pad>` ids up to `len`.
    pub fn padded(&self, len: usize) -> TokenSequence {
        let mut ids = self.ids.clone();
        ids.resize(len.max(ids.len()), PAD);
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
