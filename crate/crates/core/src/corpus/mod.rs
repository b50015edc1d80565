//! Paragraph preprocessing: segmentation, vocabulary, fixed-size encoding
//! and batching.

mod features;
mod synthetic;

pub use features::{load_features, load_features_expecting, read_manifest, write_features, write_manifest, ManifestRecord};
pub use synthetic::{generate_synthetic_corpus, SceneObject, SyntheticConfig, SyntheticScene};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<start>", "<eos>", "<unk>"];

pub fn is_special(token: usize) -> bool {
    token < SPECIAL_TOKENS.len()
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|n| n.is_whitespace()) {
            if !current.trim().is_empty() {
                out.push(current.trim().to_string());
            }
            current.clear();
        } else {
            current.push(c);
        }
    }
    if !current.trim().is_empty() {
        out.push(current.trim().to_string());
    }
    out
}

/// Lowercased whitespace tokens with leading/trailing punctuation removed.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    min_freq: usize,
}

impl Vocab {
    /// Counts tokens over the segmented, tokenized corpus and keeps those
    /// with frequency ≥ `min_freq`, ordered by descending frequency then
    /// lexicographically, after the special tokens.
    pub fn build<S: AsRef<str>>(paragraphs: &[S], min_freq: usize) -> Result<Self> {
        if paragraphs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for p in paragraphs {
            for sentence in segment_sentences(p.as_ref()) {
                for tok in tokenize(&sentence) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens, min_freq))
    }

    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index, min_freq }
    }

    /// Rebuilds the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    /// Renders sentences (without their `<eos>`) as `"a b. c d."`.
    pub fn decode_paragraph(&self, sentences: &[Vec<usize>]) -> String {
        sentences
            .iter()
            .map(|s| format!("{}.", self.decode_sentence(s)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Words of a sentence, stopping at `<eos>` and skipping padding.
    pub fn decode_sentence(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != EOS)
            .filter(|&&t| t != PAD && t != START)
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One paragraph laid out as `M × N` target tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedParagraph {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub sentence_count: usize,
    pub max_sentences: usize,
    pub max_words: usize,
}

impl EncodedParagraph {
    pub fn sentence(&self, j: usize) -> &[usize] {
        &self.tokens[j * self.max_words..(j + 1) * self.max_words]
    }

    /// Valid tokens of each sentence (including `<eos>`).
    pub fn sentences(&self) -> Vec<Vec<usize>> {
        (0..self.sentence_count)
            .map(|j| {
                let base = j * self.max_words;
                (0..self.max_words)
                    .take_while(|&i| self.mask[base + i])
                    .map(|i| self.tokens[base + i])
                    .collect()
            })
            .collect()
    }
}

/// At most `m` sentences, each truncated to `n − 1` words plus `<eos>`,
/// padded with `<pad>`.
pub fn encode_paragraph(text: &str, vocab: &Vocab, m: usize, n: usize) -> Result<EncodedParagraph> {
    if m == 0 || n < 2 {
        return Err(Error::Config(format!("paragraph grid {m}×{n} too small")));
    }
    let sentences: Vec<Vec<usize>> = segment_sentences(text)
        .iter()
        .map(|s| tokenize(s))
        .filter(|t| !t.is_empty())
        .take(m)
        .map(|words| {
            let mut ids: Vec<usize> = words.iter().take(n - 1).map(|w| vocab.id(w)).collect();
            ids.push(EOS);
            ids
        })
        .collect();
    if sentences.is_empty() {
        return Err(Error::NoSentences);
    }
    encode_sentences(&sentences, m, n)
}

/// Lays out already-tokenized sentences (each at most `n` tokens, normally
/// ending in `<eos>`).
pub fn encode_sentences(sentences: &[Vec<usize>], m: usize, n: usize) -> Result<EncodedParagraph> {
    if sentences.len() > m {
        return Err(Error::Config(format!("{} sentences exceed limit {m}", sentences.len())));
    }
    let mut tokens = vec![PAD; m * n];
    let mut mask = vec![false; m * n];
    for (j, s) in sentences.iter().enumerate() {
        if s.len() > n {
            return Err(Error::Config(format!("sentence of {} tokens exceeds limit {n}", s.len())));
        }
        for (i, &t) in s.iter().enumerate() {
            tokens[j * n + i] = t;
            mask[j * n + i] = true;
        }
    }
    Ok(EncodedParagraph {
        tokens,
        mask,
        sentence_count: sentences.len(),
        max_sentences: m,
        max_words: n,
    })
}

/// Padded `[B × M × N]` grid of target tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ParagraphBatch {
    pub batch: usize,
    pub max_sentences: usize,
    pub max_words: usize,
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub sentence_counts: Vec<usize>,
}

impl ParagraphBatch {
    pub fn from_paragraphs(items: &[&EncodedParagraph]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyCorpus)?;
        let (m, n) = (first.max_sentences, first.max_words);
        let mut tokens = Vec::with_capacity(items.len() * m * n);
        let mut mask = Vec::with_capacity(items.len() * m * n);
        let mut counts = Vec::with_capacity(items.len());
        for p in items {
            if p.max_sentences != m || p.max_words != n {
                return Err(Error::Config("mixed paragraph grid sizes in one batch".into()));
            }
            tokens.extend_from_slice(&p.tokens);
            mask.extend_from_slice(&p.mask);
            counts.push(p.sentence_count);
        }
        let batch = Self {
            batch: items.len(),
            max_sentences: m,
            max_words: n,
            tokens,
            mask,
            sentence_counts: counts,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn rows(&self) -> usize {
        self.batch * self.max_sentences * self.max_words
    }

    /// Decoder inputs: each sentence's targets shifted right behind `<start>`.
    pub fn input_tokens(&self) -> Vec<usize> {
        let n = self.max_words;
        let mut out = vec![PAD; self.tokens.len()];
        for s in 0..self.batch * self.max_sentences {
            out[s * n] = START;
            for i in 1..n {
                out[s * n + i] = if self.mask[s * n + i - 1] { self.tokens[s * n + i - 1] } else { PAD };
            }
        }
        out
    }

    /// Checks prefix-shaped masks, pad discipline and sentence counts.
    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.max_sentences, self.max_words);
        if self.tokens.len() != self.batch * m * n || self.mask.len() != self.tokens.len() {
            return Err(Error::Config("batch arrays do not match B×M×N".into()));
        }
        for b in 0..self.batch {
            let mut seen_empty = false;
            let mut non_empty = 0;
            for j in 0..m {
                let base = (b * m + j) * n;
                let len = (0..n).take_while(|&i| self.mask[base + i]).count();
                if (len..n).any(|i| self.mask[base + i]) {
                    return Err(Error::Config(format!("item {b} sentence {j}: mask is not a prefix")));
                }
                if (len..n).any(|i| self.tokens[base + i] != PAD) {
                    return Err(Error::Config(format!("item {b} sentence {j}: non-pad token under mask")));
                }
                if len == 0 {
                    seen_empty = true;
                } else {
                    if seen_empty {
                        return Err(Error::Config(format!("item {b}: sentence {j} follows an empty one")));
                    }
                    non_empty += 1;
                }
            }
            if non_empty != self.sentence_counts[b] || non_empty > m {
                return Err(Error::Config(format!("item {b}: sentence count mismatch")));
            }
        }
        Ok(())
    }

    /// Reverses each paragraph's valid tokens (all `M·N` slots read in
    /// order) over the same valid positions. With `per_sentence`, each
    /// sentence is reversed on its own instead.
    pub fn reverse_targets(&self, per_sentence: bool) -> Self {
        let (m, n) = (self.max_sentences, self.max_words);
        let mut out = self.clone();
        let groups: Vec<(usize, usize)> = if per_sentence {
            (0..self.batch * m).map(|s| (s * n, n)).collect()
        } else {
            (0..self.batch).map(|b| (b * m * n, m * n)).collect()
        };
        for (start, len) in groups {
            let valid: Vec<usize> = (start..start + len).filter(|&i| self.mask[i]).collect();
            for (k, &pos) in valid.iter().enumerate() {
                out.tokens[pos] = self.tokens[valid[valid.len() - 1 - k]];
            }
        }
        out
    }

    /// Indices of valid slots per paragraph, in reading order.
    pub fn valid_positions(&self) -> Vec<Vec<usize>> {
        let per = self.max_sentences * self.max_words;
        (0..self.batch)
            .map(|b| (b * per..(b + 1) * per).filter(|&i| self.mask[i]).collect())
            .collect()
    }
}
