//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use paracnn::decode::DecodeConfig;
use paracnn::model::ModelConfig;
use paracnn::training::{TrainConfig, TwinConfig};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "PARACNN_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory holding `train.jsonl`, `val.jsonl` and the feature files.
    pub data_dir: PathBuf,
    /// Run directory for checkpoints and logs.
    pub out_dir: PathBuf,
    /// Words seen fewer times than this in the training split map to `<unk>`.
    pub min_freq: usize,
    /// Per-epoch checkpoints retained on disk (0 keeps all).
    pub keep_checkpoints: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub twin: TwinConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            min_freq: 2,
            keep_checkpoints: 3,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            twin: TwinConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text`, applies `overrides` (`a.b.c=value`, value in TOML
    /// syntax or a bare string) and then the seed environment variable.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).context("parsing config")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid config")?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={seed:?} is not an unsigned integer"))?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let Some((key, raw)) = item.split_once('=') else {
        bail!("override {item:?} is not of the form key=value");
    };
    let value = parse_value(raw.trim());
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override {item:?} has an empty key segment");
    }
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let entry = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {item:?}: {seg} is not a table"),
        };
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
