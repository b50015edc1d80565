use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use paracnn::corpus::{generate_synthetic_corpus, write_features, write_manifest, ManifestRecord, SyntheticConfig};
use paracnn::rng::RngState;
use serde::Serialize;

use crate::data::{split_path, SPLITS};

#[derive(Debug, Clone)]
pub struct CorpusOptions {
    pub seed: u64,
    pub size: usize,
    pub out: PathBuf,
    pub force: bool,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Serialize)]
struct CorpusInfo<'a> {
    seed: u64,
    size: usize,
    feature_dim: usize,
    synthetic: &'a SyntheticConfig,
    train: usize,
    val: usize,
    test: usize,
}

const SPLIT_STREAM: u64 = u64::MAX;

/// 80/10/10 split sizes; the test split takes the rounding remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

fn is_nonempty_dir(p: &Path) -> Result<bool> {
    if !p.exists() {
        return Ok(false);
    }
    Ok(fs::read_dir(p)?.next().is_some())
}

pub fn make_corpus(opts: &CorpusOptions) -> Result<CorpusSummary> {
    if opts.size == 0 {
        bail!("corpus size must be positive");
    }
    if is_nonempty_dir(&opts.out)? {
        if !opts.force {
            bail!("{} is not empty; pass --force to overwrite", opts.out.display());
        }
        let features = opts.out.join("features");
        if features.exists() {
            fs::remove_dir_all(&features)?;
        }
    }
    let scenes = generate_synthetic_corpus(&opts.synthetic, opts.seed, opts.size)?;
    let features_dir = opts.out.join("features");
    fs::create_dir_all(&features_dir).with_context(|| format!("creating {}", features_dir.display()))?;

    let mut records = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let rel = format!("features/{}.pfv", s.id);
        write_features(&opts.out.join(&rel), s.regions(), s.feature_dim, &s.features)?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            feature_path: rel,
            paragraph: s.paragraph.clone(),
        });
    }
    write_manifest(&opts.out.join("manifest.jsonl"), &records)?;

    let mut order: Vec<usize> = (0..records.len()).collect();
    RngState::derive(opts.seed, SPLIT_STREAM).shuffle(&mut order);
    let (n_train, n_val, n_test) = split_sizes(records.len());
    let bounds = [0, n_train, n_train + n_val, records.len()];
    for (k, split) in SPLITS.iter().enumerate() {
        let mut idx = order[bounds[k]..bounds[k + 1]].to_vec();
        idx.sort_unstable();
        let part: Vec<ManifestRecord> = idx.into_iter().map(|i| records[i].clone()).collect();
        write_manifest(&split_path(&opts.out, split), &part)?;
    }
    let info = CorpusInfo {
        seed: opts.seed,
        size: opts.size,
        feature_dim: opts.synthetic.feature_dim(),
        synthetic: &opts.synthetic,
        train: n_train,
        val: n_val,
        test: n_test,
    };
    fs::write(opts.out.join("corpus.json"), serde_json::to_string_pretty(&info)? + "\n")?;
    Ok(CorpusSummary {
        train: n_train,
        val: n_val,
        test: n_test,
    })
}
