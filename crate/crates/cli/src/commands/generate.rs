use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use paracnn::checkpoint::Checkpoint;
use paracnn::corpus::{load_features_expecting, Vocab};
use paracnn::decode::{format_paragraph, greedy_decode, DecodeConfig, PenaltyScope, SentenceCount};
use serde::{Deserialize, Serialize};

use crate::data::Manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    /// One sentence per line, paragraphs separated by a blank line.
    #[default]
    Text,
    /// One `{"id", "paragraph"}` object per line.
    Jsonl,
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub checkpoint: PathBuf,
    pub manifest: Option<PathBuf>,
    pub features: Vec<PathBuf>,
    pub sentences: Option<usize>,
    pub adaptive: Option<(usize, usize)>,
    pub rep_penalty: Option<f64>,
    pub block_trigrams: Option<bool>,
    pub penalty_scope: Option<PenaltyScope>,
    pub max_words: Option<usize>,
    /// Vocabulary the caller expects; must match the checkpoint's.
    pub vocab: Option<PathBuf>,
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub id: String,
    pub paragraph: String,
}

/// Decode settings implied by the options for a model with `m` sentences
/// of `n` words.
pub fn decode_config(opts: &GenerateOptions, m: usize, n: usize) -> Result<DecodeConfig> {
    let mut dc = DecodeConfig {
        sentences: SentenceCount::Fixed(m),
        max_words: n,
        ..DecodeConfig::default()
    };
    match (opts.sentences, opts.adaptive) {
        (Some(_), Some(_)) => bail!("--sentences and --adaptive are mutually exclusive"),
        (Some(k), None) => dc.sentences = SentenceCount::Fixed(k),
        (None, Some((min, max))) => dc.sentences = SentenceCount::Adaptive { min, max },
        (None, None) => {}
    }
    if let Some(g) = opts.rep_penalty {
        dc.repetition_penalty = g;
    }
    if let Some(b) = opts.block_trigrams {
        dc.block_trigrams = b;
    }
    if let Some(s) = opts.penalty_scope {
        dc.penalty_scope = s;
    }
    if let Some(w) = opts.max_words {
        dc.max_words = w;
    }
    dc.validate()?;
    Ok(dc)
}

pub fn generate(opts: &GenerateOptions) -> Result<Vec<Generated>> {
    let ckpt = Checkpoint::load(&opts.checkpoint).with_context(|| format!("loading {}", opts.checkpoint.display()))?;
    let vocab = ckpt.vocab();
    if let Some(p) = &opts.vocab {
        let mut expected: Vocab = serde_json::from_str(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing vocabulary {}", p.display()))?;
        expected.reindex();
        if expected.tokens() != vocab.tokens() {
            bail!(
                "vocabulary mismatch: {} has {} tokens, checkpoint has {}",
                p.display(),
                expected.len(),
                vocab.len()
            );
        }
    }
    let model = ckpt.forward_model()?;
    let cfg = model.config().clone();
    let dc = decode_config(opts, cfg.max_sentences, cfg.max_words)?;

    let mut inputs = Vec::new();
    if let Some(m) = &opts.manifest {
        let manifest = Manifest::read(m)?;
        for r in &manifest.records {
            inputs.push((r.id.clone(), manifest.features(r, cfg.feature_dim)?));
        }
    }
    for p in &opts.features {
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let t = load_features_expecting(p, cfg.feature_dim).with_context(|| format!("loading {}", p.display()))?;
        inputs.push((id, t));
    }
    if inputs.is_empty() {
        bail!("nothing to generate: pass --manifest or --features");
    }
    inputs
        .into_iter()
        .map(|(id, features)| {
            let sentences = greedy_decode(&model, &features, &dc)?;
            Ok(Generated {
                id,
                paragraph: format_paragraph(&vocab, &sentences),
            })
        })
        .collect()
}

pub fn render(items: &[Generated], format: OutputFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        OutputFormat::Text => {
            for (i, g) in items.iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                out.push_str(&g.paragraph);
                out.push('\n');
            }
        }
        OutputFormat::Jsonl => {
            for g in items {
                let flat = Generated {
                    id: g.id.clone(),
                    paragraph: g.paragraph.lines().collect::<Vec<_>>().join(" "),
                };
                out.push_str(&serde_json::to_string(&flat)?);
                out.push('\n');
            }
        }
    }
    Ok(out)
}
