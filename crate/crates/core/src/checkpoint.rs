//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `PCKPT1`, `u64` metadata length, metadata
//! JSON, `u32` entry count, then per entry `u32` name length, UTF-8 name,
//! `u32` rank, `rank × u64` extents and the values as `f64`. Entries are
//! written in name order, so equal states produce equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::{ModelConfig, ParaCnn};
use crate::rng::{RngState, RNG_ALGORITHM};
use crate::training::{load_module, TrainConfig, Trainer, TwinConfig};

const MAGIC: &[u8; 6] = b"PCKPT1";

pub type Entries = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub twin: TwinConfig,
    pub vocab: Vocab,
    pub seed: u64,
    pub rng_algorithm: String,
    /// Completed epochs.
    pub epoch: usize,
    pub val_ce: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub entries: Entries,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, vocab: &Vocab, val_ce: Option<f64>) -> Self {
        Self {
            meta: CheckpointMeta {
                model: trainer.model_cfg.clone(),
                train: trainer.train_cfg.clone(),
                twin: trainer.twin_cfg.clone(),
                vocab: vocab.clone(),
                seed: trainer.seed,
                rng_algorithm: RNG_ALGORITHM.to_string(),
                epoch: trainer.epoch,
                val_ce,
            },
            entries: trainer
                .named_state()
                .into_iter()
                .map(|(n, s, v)| (n, (s, v)))
                .collect(),
        }
    }

    /// Rebuilds the full trainer (both networks, critic, optimisers).
    pub fn to_trainer(&self) -> Result<Trainer> {
        let m = &self.meta;
        let mut t = Trainer::new(m.model.clone(), m.train.clone(), m.twin.clone(), m.seed)?;
        t.load_state(&self.entries)?;
        t.epoch = m.epoch;
        Ok(t)
    }

    /// Only the forward network, which is all generation needs.
    pub fn forward_model(&self) -> Result<ParaCnn> {
        let model = ParaCnn::new(self.meta.model.clone(), &mut RngState::new(self.meta.seed))?;
        load_module("fwd", &model.params(), &self.entries)?;
        Ok(model)
    }

    pub fn vocab(&self) -> Vocab {
        let mut v = self.meta.vocab.clone();
        v.reindex();
        v
    }

    /// Drops every entry not belonging to the forward network.
    pub fn forward_only(&self) -> Self {
        Self {
            meta: self.meta.clone(),
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with("fwd."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, (shape, values)) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: origin.to_string(),
                found: magic.to_vec(),
            });
        }
        let meta_len = r.u64()? as usize;
        let mut meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        meta.vocab.reindex();
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{origin}: entry name is not UTF-8")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.insert(name, (shape, values));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{origin}: {} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, entries })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Truncated {
            path: self.origin.to_string(),
            expected: (self.pos + n) as u64,
            actual: self.bytes.len() as u64,
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
