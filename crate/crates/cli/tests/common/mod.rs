#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use paracnn::corpus::SyntheticConfig;
use paracnn::training::TwinMode;
use paracnn_cli::{make_corpus, CorpusOptions, RunConfig};

static HEAVY: Mutex<()> = Mutex::new(());

/// Serialises expensive tests so their timings are not inflated by
/// siblings sharing the core.
pub fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn corpus(dir: &Path, seed: u64, size: usize, synthetic: SyntheticConfig) -> PathBuf {
    let out = dir.join("corpus");
    make_corpus(&CorpusOptions {
        seed,
        size,
        out: out.clone(),
        force: false,
        synthetic,
    })
    .unwrap();
    out
}

pub fn small_synthetic() -> SyntheticConfig {
    SyntheticConfig {
        max_objects: 3,
        ..SyntheticConfig::default()
    }
}

/// A few-second configuration on a small corpus.
pub fn tiny_run(data: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse("", &[]).unwrap();
    cfg.seed = 5;
    cfg.data_dir = data.to_path_buf();
    cfg.out_dir = out.to_path_buf();
    cfg.min_freq = 1;
    cfg.keep_checkpoints = 0;
    cfg.model.max_sentences = 3;
    cfg.model.max_words = 8;
    cfg.model.topic_depth = 2;
    cfg.model.word_depth = 3;
    cfg.model.attention_layers = vec![2];
    cfg.model.attention_heads = 2;
    cfg.model.count_hidden = [8, 8];
    cfg.model = cfg.model.with_width(12);
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.learning_rate = 1e-3;
    cfg.twin.critic_hidden = 6;
    cfg
}

pub fn with_mode(mut cfg: RunConfig, mode: TwinMode) -> RunConfig {
    cfg.twin.mode = mode;
    cfg
}

/// Relative paths and contents of every file under `root`, sorted.
pub fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Word trigrams repeated anywhere in the paragraph's word stream.
pub fn repeated_trigrams(paragraph: &str) -> usize {
    let words = paracnn::corpus::tokenize(paragraph);
    let mut seen = std::collections::HashSet::new();
    words.windows(3).filter(|w| !seen.insert(w.to_vec())).count()
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_paracnn")
}
