//! Manifest splits resolved against their directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use paracnn::corpus::{encode_paragraph, load_features_expecting, read_manifest, ManifestRecord, Vocab};
use paracnn::training::Example;
use paracnn::Tensor;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Records of a manifest together with the directory their feature paths
/// are relative to.
pub struct Manifest {
    pub base: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let records = read_manifest(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base, records })
    }

    pub fn feature_path(&self, r: &ManifestRecord) -> PathBuf {
        self.base.join(&r.feature_path)
    }

    pub fn features(&self, r: &ManifestRecord, dim: usize) -> Result<Tensor> {
        let p = self.feature_path(r);
        load_features_expecting(&p, dim).with_context(|| format!("loading features for {}", r.id))
    }

    /// Feature width of the first record's file.
    pub fn feature_dim(&self) -> Result<usize> {
        let r = self.records.first().context("manifest is empty")?;
        let p = self.feature_path(r);
        let t = paracnn::corpus::load_features(&p).with_context(|| format!("loading {}", p.display()))?;
        Ok(t.shape()[1])
    }

    pub fn examples(&self, vocab: &Vocab, dim: usize, m: usize, n: usize) -> Result<Vec<Example>> {
        self.records
            .iter()
            .map(|r| {
                Ok(Example {
                    id: r.id.clone(),
                    features: self.features(r, dim)?,
                    paragraph: encode_paragraph(&r.paragraph, vocab, m, n)
                        .with_context(|| format!("encoding paragraph of {}", r.id))?,
                })
            })
            .collect()
    }
}
