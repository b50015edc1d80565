//! Greedy paragraph decoding with an optional repetition penalty.

use serde::{Deserialize, Serialize};

use crate::corpus::{is_special, Vocab, EOS, PAD, START};
use crate::error::{Error, Result};
use crate::model::{ImageBatch, ParaCnn, TopicState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceCount {
    Fixed(usize),
    Adaptive { min: usize, max: usize },
}

/// Which tokens the repetition penalty looks back over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScope {
    Paragraph,
    Sentence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub sentences: SentenceCount,
    /// Word budget per sentence, `<eos>` included.
    pub max_words: usize,
    pub repetition_penalty: f64,
    pub block_trigrams: bool,
    pub penalty_scope: PenaltyScope,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            sentences: SentenceCount::Fixed(6),
            max_words: 30,
            repetition_penalty: 2.0,
            block_trigrams: true,
            penalty_scope: PenaltyScope::Paragraph,
        }
    }
}

impl DecodeConfig {
    /// Plain argmax decoding: no penalty, no blocking.
    pub fn greedy(sentences: SentenceCount, max_words: usize) -> Self {
        Self {
            sentences,
            max_words,
            repetition_penalty: 0.0,
            block_trigrams: false,
            penalty_scope: PenaltyScope::Paragraph,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.sentences {
            SentenceCount::Fixed(0) => return Err(Error::Config("sentence count must be at least 1".into())),
            SentenceCount::Adaptive { min, max } if min == 0 || min > max => {
                return Err(Error::Config(format!("invalid sentence clamp [{min}, {max}]")))
            }
            _ => {}
        }
        if self.max_words == 0 {
            return Err(Error::Config("max_words must be positive".into()));
        }
        if !(self.repetition_penalty >= 0.0) {
            return Err(Error::Config("repetition penalty must be non-negative".into()));
        }
        Ok(())
    }
}

/// `logit[t] −= γ·count(t)` over `history`; with `block_trigrams`, any
/// token completing a trigram already present in `history` gets `−∞`.
/// `history` should hold only word tokens.
pub fn apply_repetition_penalty(logits: &mut [f64], history: &[usize], gamma: f64, block_trigrams: bool) {
    if gamma != 0.0 {
        for &t in history {
            if t < logits.len() {
                logits[t] -= gamma;
            }
        }
    }
    if block_trigrams && history.len() >= 2 {
        let (a, b) = (history[history.len() - 2], history[history.len() - 1]);
        for w in history.windows(3) {
            if w[0] == a && w[1] == b && w[2] < logits.len() {
                logits[w[2]] = f64::NEG_INFINITY;
            }
        }
    }
}

/// Highest logit, lowest index on ties, never `<pad>` or `<start>`.
/// Falls back to `<eos>` when everything is blocked.
fn pick(logits: &[f64]) -> usize {
    let mut best = None;
    for (t, &v) in logits.iter().enumerate() {
        if t == PAD || t == START || v == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none_or(|b: usize| v > logits[b]) {
            best = Some(t);
        }
    }
    best.unwrap_or(EOS)
}

/// Decodes one paragraph from `[R × d_I]` region features. Each sentence
/// holds its tokens including a final `<eos>` when one was emitted.
pub fn greedy_decode(model: &ParaCnn, features: &Tensor, dc: &DecodeConfig) -> Result<Vec<Vec<usize>>> {
    dc.validate()?;
    let image = model.project_features(&ImageBatch::from_features(&[features])?)?;
    let count = match dc.sentences {
        SentenceCount::Fixed(k) => k,
        SentenceCount::Adaptive { min, max } => model.counter.predict(&image.global, min, max)?[0],
    };
    let mut state = TopicState::new(1, count);
    let mut paragraph: Vec<Vec<usize>> = Vec::with_capacity(count);
    let mut words: Vec<usize> = Vec::new();
    for _ in 0..count {
        let context = model.pool_context(paragraph.last().map(Vec::as_slice))?;
        let topic = model.topic_forward(&mut state, &image.global, &context)?;
        let mut prefix = vec![START];
        let mut sentence = Vec::new();
        let sentence_start = words.len();
        for _ in 0..dc.max_words {
            let (logits, _) = model.sentence_forward(&topic, &prefix, &image)?;
            let v = logits.shape()[1];
            let mut last = logits.data()[(prefix.len() - 1) * v..].to_vec();
            let history = match dc.penalty_scope {
                PenaltyScope::Paragraph => &words[..],
                PenaltyScope::Sentence => &words[sentence_start..],
            };
            apply_repetition_penalty(&mut last, history, dc.repetition_penalty, dc.block_trigrams);
            let tok = pick(&last);
            sentence.push(tok);
            if tok == EOS {
                break;
            }
            if !is_special(tok) {
                words.push(tok);
            }
            prefix.push(tok);
        }
        paragraph.push(sentence);
    }
    Ok(paragraph)
}

/// Adaptive-length decoding: sentence count from the predictor, clamped.
pub fn decode_adaptive(model: &ParaCnn, features: &Tensor, min: usize, max: usize, dc: &DecodeConfig) -> Result<Vec<Vec<usize>>> {
    let dc = DecodeConfig {
        sentences: SentenceCount::Adaptive { min, max },
        ..dc.clone()
    };
    greedy_decode(model, features, &dc)
}

/// One sentence per line, each ending in a period.
pub fn format_paragraph(vocab: &Vocab, sentences: &[Vec<usize>]) -> String {
    sentences
        .iter()
        .map(|s| format!("{}.", vocab.decode_sentence(s)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Splits line-structured output into paragraphs (blank-line separated),
/// each joined into a single line of text.
pub fn parse_paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !current.is_empty() {
                out.push(current.join(" "));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        out.push(current.join(" "));
    }
    out
}
