use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use paracnn::checkpoint::Checkpoint;
use paracnn::corpus::Vocab;
use paracnn::training::{evaluate_ce, Example, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{split_path, Manifest};

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const LOCK_FILE: &str = "train.lock";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of the metrics log. Epoch 0 holds the untrained model's
/// cross-entropies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce_fwd: f64,
    pub ce_bwd: Option<f64>,
    pub twin_l2: Option<f64>,
    pub critic_loss: Option<f64>,
    pub critic_updates: usize,
    pub generator_updates: usize,
    pub max_critic_weight: Option<f64>,
    pub val_ce: Option<f64>,
    pub best: bool,
}

#[derive(Serialize)]
struct TimingRecord {
    epoch: usize,
    wallclock_s: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub out_dir: PathBuf,
}

impl TrainOutcome {
    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("at least the epoch-0 record")
    }
}

pub fn checkpoint_path(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("{name}.ckpt"))
}

fn epoch_checkpoint(out_dir: &Path, epoch: usize) -> PathBuf {
    checkpoint_path(out_dir, &format!("epoch-{epoch:04}"))
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display()))?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self(path))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("bad metrics line {l:?}")))
        .collect()
}

/// Drops log lines past `epoch`, keeping the remaining lines byte for byte.
fn truncate_log(path: &Path, epoch: usize) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut kept = String::new();
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: EpochRecord = serde_json::from_str(line).with_context(|| format!("bad metrics line {line:?}"))?;
        if r.epoch <= epoch {
            kept.push_str(line);
            kept.push('\n');
            records.push(r);
        }
    }
    fs::write(path, kept)?;
    Ok(records)
}

/// Builds the vocabulary from the training split and fills in the
/// data-dependent model fields.
pub fn prepare(cfg: &RunConfig) -> Result<(RunConfig, Vocab, Vec<Example>, Vec<Example>)> {
    let train = Manifest::read(&split_path(&cfg.data_dir, "train"))?;
    if train.records.is_empty() {
        bail!("training split is empty");
    }
    let texts: Vec<&str> = train.records.iter().map(|r| r.paragraph.as_str()).collect();
    let vocab = Vocab::build(&texts, cfg.min_freq)?;
    let mut resolved = cfg.clone();
    resolved.model.vocab_size = vocab.len();
    resolved.model.feature_dim = train.feature_dim()?;
    resolved.model.validate()?;
    resolved.train.validate()?;
    resolved.twin.validate()?;
    resolved.decode.validate()?;
    let (m, n, d) = (resolved.model.max_sentences, resolved.model.max_words, resolved.model.feature_dim);
    let train_ex = train.examples(&vocab, d, m, n)?;
    let val_path = split_path(&cfg.data_dir, "val");
    let val_ex = if val_path.exists() {
        Manifest::read(&val_path)?.examples(&vocab, d, m, n)?
    } else {
        Vec::new()
    };
    Ok((resolved, vocab, train_ex, val_ex))
}

/// Trains per `cfg`, writing logs and checkpoints under `cfg.out_dir`.
/// With `resume`, continues from `checkpoints/last.ckpt` when present.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let (cfg, vocab, train_ex, val_ex) = prepare(cfg)?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(out.join(CHECKPOINT_DIR)).with_context(|| format!("creating {}", out.display()))?;
    let _lock = Lock::acquire(&out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;

    let metrics = out.join(METRICS_LOG);
    let timing = out.join(TIMING_LOG);
    let last = checkpoint_path(&out, "last");
    let bs = cfg.train.batch_size;
    let val_ce = |t: &Trainer| -> Result<Option<f64>> {
        Ok(if val_ex.is_empty() { None } else { Some(evaluate_ce(&t.forward, &val_ex, bs)?) })
    };

    let (mut trainer, mut records) = if resume && last.exists() {
        let ckpt = Checkpoint::load(&last)?;
        if ckpt.meta.model != cfg.model || ckpt.meta.twin != cfg.twin || ckpt.meta.seed != cfg.seed {
            bail!("checkpoint {} was written with a different configuration", last.display());
        }
        if ckpt.vocab().tokens() != vocab.tokens() {
            bail!("checkpoint vocabulary differs from the one built from {}", cfg.data_dir.display());
        }
        let mut trainer = ckpt.to_trainer()?;
        trainer.set_train_config(cfg.train.clone())?;
        let records = truncate_log(&metrics, trainer.epoch)?;
        log::info!("resuming from epoch {}", trainer.epoch);
        (trainer, records)
    } else {
        for p in [&metrics, &timing] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        let trainer = Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.twin.clone(), cfg.seed)?;
        let initial = EpochRecord {
            epoch: 0,
            ce_fwd: evaluate_ce(&trainer.forward, &train_ex, bs)?,
            ce_bwd: None,
            twin_l2: None,
            critic_loss: None,
            critic_updates: 0,
            generator_updates: 0,
            max_critic_weight: None,
            val_ce: val_ce(&trainer)?,
            best: false,
        };
        append_line(&metrics, &initial)?;
        (trainer, vec![initial])
    };

    let mut best = records
        .iter()
        .filter(|r| r.best)
        .map(|r| r.val_ce.unwrap_or(r.ce_fwd))
        .fold(f64::INFINITY, f64::min);
    while trainer.epoch < cfg.train.epochs {
        let started = Instant::now();
        let stats = trainer.train_epoch(&train_ex).with_context(|| {
            format!("training aborted; last good checkpoint is {}", last.display())
        })?;
        let v = val_ce(&trainer)?;
        let score = v.unwrap_or(stats.ce_fwd);
        let is_best = score < best;
        if is_best {
            best = score;
        }
        let record = EpochRecord {
            epoch: stats.epoch,
            ce_fwd: stats.ce_fwd,
            ce_bwd: stats.ce_bwd,
            twin_l2: stats.twin_l2,
            critic_loss: stats.critic_loss,
            critic_updates: stats.critic_updates,
            generator_updates: stats.generator_updates,
            max_critic_weight: stats.max_critic_weight,
            val_ce: v,
            best: is_best,
        };
        let ckpt = Checkpoint::from_trainer(&trainer, &vocab, v);
        let epoch_path = epoch_checkpoint(&out, stats.epoch);
        ckpt.save(&epoch_path)?;
        if is_best {
            fs::copy(&epoch_path, checkpoint_path(&out, "best"))?;
        }
        fs::copy(&epoch_path, &last)?;
        if cfg.keep_checkpoints > 0 && stats.epoch > cfg.keep_checkpoints {
            let stale = epoch_checkpoint(&out, stats.epoch - cfg.keep_checkpoints);
            if stale.exists() {
                fs::remove_file(stale)?;
            }
        }
        append_line(&metrics, &record)?;
        append_line(
            &timing,
            &TimingRecord {
                epoch: stats.epoch,
                wallclock_s: started.elapsed().as_secs_f64(),
            },
        )?;
        log::info!(
            "epoch {} ce_fwd {:.4} val_ce {} {}",
            record.epoch,
            record.ce_fwd,
            v.map_or("-".to_string(), |x| format!("{x:.4}")),
            if is_best { "(best)" } else { "" }
        );
        records.push(record);
    }
    Ok(TrainOutcome { records, out_dir: out })
}
