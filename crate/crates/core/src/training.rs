//! Maximum-likelihood training, the backward twin network and the
//! Wasserstein critic that couples the two.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedParagraph, ParagraphBatch};
use crate::error::{Error, Result};
use crate::layers::{join, BiGruCell, Linear, Module};
use crate::model::{ImageBatch, ModelConfig, ParaCnn};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// RMSprop: `v ← α·v + (1−α)·g²`, `p ← p − lr·g/(√v + ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    #[serde(skip)]
    pub square_avg: BTreeMap<String, Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            alpha: 0.9,
            eps: 1e-8,
            square_avg: BTreeMap::new(),
        }
    }

    /// Updates every parameter from its accumulated gradient. A missing
    /// gradient counts as zero. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(|(_, p)| p.grad()).collect();
        for ((name, _), g) in params.iter().zip(&grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
            }
        }
        for ((name, p), g) in params.iter().zip(grads) {
            let v = self.square_avg.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            if v.len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "rmsprop",
                    lhs: vec![v.len()],
                    rhs: p.shape().to_vec(),
                });
            }
            let mut data = p.data_mut();
            match g {
                Some(g) => {
                    for i in 0..data.len() {
                        v[i] = self.alpha * v[i] + (1.0 - self.alpha) * g[i] * g[i];
                        data[i] -= self.lr * g[i] / (v[i].sqrt() + self.eps);
                    }
                }
                None => v.iter_mut().for_each(|x| *x *= self.alpha),
            }
        }
        Ok(())
    }
}

pub fn zero_grads(params: &[(String, Tensor)]) {
    params.iter().for_each(|(_, p)| p.zero_grad());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwinMode {
    None,
    L2,
    Adversarial,
    L2PlusAdversarial,
}

impl TwinMode {
    pub fn uses_l2(self) -> bool {
        matches!(self, TwinMode::L2 | TwinMode::L2PlusAdversarial)
    }

    pub fn uses_critic(self) -> bool {
        matches!(self, TwinMode::Adversarial | TwinMode::L2PlusAdversarial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwinConfig {
    pub mode: TwinMode,
    pub lambda_l2: f64,
    pub lambda_adv: f64,
    pub critic_lr: f64,
    pub critic_steps: usize,
    pub clip: f64,
    pub critic_hidden: usize,
    /// Reverse each sentence on its own instead of the whole paragraph.
    pub per_sentence_reversal: bool,
    /// Stop the L2 gradient at the backward network, so only the forward
    /// network is pulled towards the other.
    pub detach_backward_l2: bool,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            mode: TwinMode::None,
            lambda_l2: 1.0,
            lambda_adv: 0.001,
            critic_lr: 2e-4,
            critic_steps: 5,
            clip: 0.01,
            critic_hidden: 512,
            per_sentence_reversal: false,
            detach_backward_l2: false,
        }
    }
}

impl TwinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_l2 < 0.0 || self.lambda_adv < 0.0 {
            return Err(Error::Config("twin coefficients must be non-negative".into()));
        }
        if self.critic_steps == 0 {
            return Err(Error::Config("critic_steps must be at least 1".into()));
        }
        if !(self.clip > 0.0) || self.critic_hidden == 0 || !(self.critic_lr > 0.0) {
            return Err(Error::Config("critic clip, hidden size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 4e-4,
            rms_alpha: 0.9,
            rms_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.rms_alpha) || !(self.rms_eps > 0.0) {
            return Err(Error::Config("invalid optimiser settings".into()));
        }
        Ok(())
    }

    fn optimizer(&self, lr: f64) -> RmsProp {
        RmsProp {
            lr,
            alpha: self.rms_alpha,
            eps: self.rms_eps,
            square_avg: BTreeMap::new(),
        }
    }
}

/// Wasserstein critic: bi-GRU over a hidden-feature sequence, then an
/// affine map of the final states to an unbounded score.
#[derive(Clone)]
pub struct Critic {
    pub gru: BiGruCell,
    pub head: Linear,
}

impl Critic {
    pub fn new(rng: &mut RngState, input: usize, hidden: usize) -> Self {
        Self {
            gru: BiGruCell::new(rng, input, hidden),
            head: Linear::new(rng, 2 * hidden, 1),
        }
    }

    /// Scores `[B × 1]` for `B` packed sequences `[B·L × d]`.
    pub fn score(&self, seqs: &Tensor, batch: usize, lengths: &[usize]) -> Result<Tensor> {
        let (_, fin) = self.gru.forward_batch(seqs, batch, lengths)?;
        self.head.forward(&fin)
    }

    /// Clamps every weight into `[−c, c]`.
    pub fn clip(&self, c: f64) {
        for (_, p) in self.params() {
            p.data_mut().iter_mut().for_each(|v| *v = v.clamp(-c, c));
        }
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|(_, p)| p.to_vec())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Module for Critic {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.gru.collect_params(&join(prefix, "gru"), out);
        self.head.collect_params(&join(prefix, "head"), out);
    }
}

/// Rows of one batch's hidden frames gathered into equal-length sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Packing {
    pub index: Vec<Option<usize>>,
    pub lengths: Vec<usize>,
}

impl Packing {
    pub fn new(sequences: &[Vec<usize>]) -> Self {
        let longest = sequences.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut index = Vec::with_capacity(sequences.len() * longest);
        for s in sequences {
            index.extend(s.iter().map(|&r| Some(r)));
            index.extend(std::iter::repeat_n(None, longest - s.len()));
        }
        Self {
            index,
            lengths: sequences.iter().map(Vec::len).collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn apply(&self, hidden: &Tensor) -> Result<Tensor> {
        hidden.gather_rows(&self.index)
    }
}

/// Forward-network rows and the backward-network rows predicting the same
/// token, per paragraph (or per sentence when reversal is per sentence).
pub fn twin_alignment(batch: &ParagraphBatch, per_sentence: bool) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let n = batch.max_words;
    let groups: Vec<(usize, usize)> = if per_sentence {
        (0..batch.batch * batch.max_sentences).map(|s| (s * n, n)).collect()
    } else {
        let per = batch.max_sentences * n;
        (0..batch.batch).map(|b| (b * per, per)).collect()
    };
    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    for (start, len) in groups {
        let valid: Vec<usize> = (start..start + len).filter(|&i| batch.mask[i]).collect();
        if valid.is_empty() {
            continue;
        }
        bwd.push(valid.iter().rev().copied().collect());
        fwd.push(valid);
    }
    if per_sentence {
        // regroup per paragraph so critic sequences stay paragraph-level
        let per = batch.max_sentences * n;
        let regroup = |parts: Vec<Vec<usize>>, key: &dyn Fn(&Vec<usize>) -> usize| {
            let mut out: Vec<Vec<usize>> = vec![Vec::new(); batch.batch];
            for p in parts {
                out[key(&p) / per].extend(p);
            }
            out.into_iter().filter(|p| !p.is_empty()).collect::<Vec<_>>()
        };
        let f = regroup(fwd, &|p| p[0]);
        let b = regroup(bwd, &|p| p[0]);
        return (f, b);
    }
    (fwd, bwd)
}

/// Mean squared coordinate difference between aligned rows.
pub fn twin_l2_loss(h_fwd: &Tensor, h_bwd: &Tensor, fwd_rows: &[usize], bwd_rows: &[usize]) -> Result<Tensor> {
    if fwd_rows.len() != bwd_rows.len() || fwd_rows.is_empty() {
        return Err(Error::InvalidShape {
            op: "twin_l2_loss",
            msg: format!("{} forward rows vs {} backward rows", fwd_rows.len(), bwd_rows.len()),
        });
    }
    let f = h_fwd.gather_rows(&fwd_rows.iter().map(|&r| Some(r)).collect::<Vec<_>>())?;
    let b = h_bwd.gather_rows(&bwd_rows.iter().map(|&r| Some(r)).collect::<Vec<_>>())?;
    Ok(f.sub(&b)?.square().mean())
}

/// `mean(score(fake)) − mean(score(real))` where the forward network's
/// features are fake and the backward network's are real.
pub fn critic_loss(critic: &Critic, fake: &Tensor, real: &Tensor, packing_fake: &Packing, packing_real: &Packing) -> Result<Tensor> {
    let sf = critic.score(fake, packing_fake.batch(), &packing_fake.lengths)?.mean();
    let sr = critic.score(real, packing_real.batch(), &packing_real.lengths)?.mean();
    sf.sub(&sr)
}

/// One optimiser step on the critic followed by weight clipping. Inputs
/// must already be detached from the generators.
pub fn critic_step(
    critic: &Critic,
    fake: &Tensor,
    real: &Tensor,
    packing_fake: &Packing,
    packing_real: &Packing,
    opt: &mut RmsProp,
    clip: f64,
) -> Result<f64> {
    let params = critic.params();
    zero_grads(&params);
    let loss = critic_loss(critic, fake, real, packing_fake, packing_real)?;
    loss.backward()?;
    opt.step(&params)?;
    critic.clip(clip);
    Ok(loss.item())
}

/// Wasserstein generator objective `−mean(score(h_fwd))`.
pub fn adversarial_generator_loss(critic: &Critic, packed_fwd: &Tensor, packing: &Packing) -> Result<Tensor> {
    Ok(critic.score(packed_fwd, packing.batch(), &packing.lengths)?.mean().neg())
}

/// One training item: region features and its encoded paragraph.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub features: Tensor,
    pub paragraph: EncodedParagraph,
}

pub fn make_batch(items: &[&Example]) -> Result<(ParagraphBatch, ImageBatch)> {
    let paragraphs: Vec<&EncodedParagraph> = items.iter().map(|e| &e.paragraph).collect();
    let feats: Vec<&Tensor> = items.iter().map(|e| &e.features).collect();
    Ok((ParagraphBatch::from_paragraphs(&paragraphs)?, ImageBatch::from_features(&feats)?))
}

/// Teacher-forced cross-entropy plus the sentence-count loss on the
/// detached image feature. Returns the graph-attached sum and the CE value.
pub fn mle_objective(model: &ParaCnn, batch: &ParagraphBatch, image: &ImageBatch) -> Result<(Tensor, f64, crate::model::ParagraphOutput)> {
    let (ce, out) = model.loss(batch, image)?;
    let count = model.counter.loss(&out.image.global.detach(), &batch.sentence_counts)?;
    let value = ce.item();
    Ok((ce.add(&count)?, value, out))
}

/// One maximum-likelihood update; returns the cross-entropy before it.
pub fn mle_step(model: &ParaCnn, batch: &ParagraphBatch, image: &ImageBatch, opt: &mut RmsProp) -> Result<f64> {
    let params = model.params();
    zero_grads(&params);
    let (objective, ce, _) = mle_objective(model, batch, image)?;
    check_finite("cross-entropy", ce)?;
    objective.backward()?;
    opt.step(&params)?;
    Ok(ce)
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

/// Mean teacher-forced cross-entropy without updating anything.
pub fn evaluate_ce(model: &ParaCnn, data: &[Example], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (batch, image) = make_batch(&refs)?;
        let tokens = batch.mask.iter().filter(|&&m| m).count() as f64;
        let (ce, _) = model.loss(&batch, &image)?;
        total += ce.item() * tokens;
        weight += tokens;
    }
    model.params().iter().for_each(|(_, p)| p.zero_grad());
    Ok(total / weight.max(1.0))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce_fwd: f64,
    pub ce_bwd: Option<f64>,
    pub twin_l2: Option<f64>,
    pub critic_loss: Option<f64>,
    pub critic_updates: usize,
    pub generator_updates: usize,
    /// Largest `|w|` over critic weights observed after any critic step.
    pub max_critic_weight: Option<f64>,
}

/// Forward network plus, when twin training is on, the backward network,
/// the critic and all optimiser state.
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub twin_cfg: TwinConfig,
    pub seed: u64,
    pub epoch: usize,
    pub forward: ParaCnn,
    pub backward: Option<ParaCnn>,
    pub critic: Option<Critic>,
    pub opt_forward: RmsProp,
    pub opt_backward: RmsProp,
    pub opt_critic: RmsProp,
}

const STREAM_FORWARD: u64 = 0;
const STREAM_BACKWARD: u64 = 1;
const STREAM_CRITIC: u64 = 2;
const STREAM_SHUFFLE: u64 = 1 << 32;

impl Trainer {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig, twin_cfg: TwinConfig, seed: u64) -> Result<Self> {
        train_cfg.validate()?;
        twin_cfg.validate()?;
        let forward = ParaCnn::new(model_cfg.clone(), &mut RngState::derive(seed, STREAM_FORWARD))?;
        let backward = match twin_cfg.mode {
            TwinMode::None => None,
            _ => Some(ParaCnn::new(model_cfg.clone(), &mut RngState::derive(seed, STREAM_BACKWARD))?),
        };
        let critic = twin_cfg.mode.uses_critic().then(|| {
            Critic::new(&mut RngState::derive(seed, STREAM_CRITIC), model_cfg.channels, twin_cfg.critic_hidden)
        });
        if let Some(c) = &critic {
            c.clip(twin_cfg.clip);
        }
        Ok(Self {
            opt_forward: train_cfg.optimizer(train_cfg.learning_rate),
            opt_backward: train_cfg.optimizer(train_cfg.learning_rate),
            opt_critic: train_cfg.optimizer(twin_cfg.critic_lr),
            model_cfg,
            train_cfg,
            twin_cfg,
            seed,
            epoch: 0,
            forward,
            backward,
            critic,
        })
    }

    /// Swaps in new training settings (epochs, batch size, learning rate,
    /// RMSprop constants) while keeping parameters and optimiser state.
    pub fn set_train_config(&mut self, cfg: TrainConfig) -> Result<()> {
        cfg.validate()?;
        for opt in [&mut self.opt_forward, &mut self.opt_backward] {
            opt.lr = cfg.learning_rate;
        }
        for opt in [&mut self.opt_forward, &mut self.opt_backward, &mut self.opt_critic] {
            opt.alpha = cfg.rms_alpha;
            opt.eps = cfg.rms_eps;
        }
        self.train_cfg = cfg;
        Ok(())
    }

    /// Item order for `epoch` (0-based); a pure function of seed and epoch.
    pub fn epoch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        RngState::derive(self.seed, STREAM_SHUFFLE + epoch as u64).shuffle(&mut order);
        order
    }

    /// Runs one epoch over `data` and advances the epoch counter.
    pub fn train_epoch(&mut self, data: &[Example]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let order = self.epoch_order(self.epoch, data.len());
        let mut stats = EpochStats {
            epoch: self.epoch + 1,
            ..Default::default()
        };
        let mut sums = [0.0; 4];
        let mut critic_steps = 0usize;
        let batches = order.chunks(self.train_cfg.batch_size);
        let n_batches = batches.len();
        for (i, chunk) in batches.enumerate() {
            let items: Vec<&Example> = chunk.iter().map(|&k| &data[k]).collect();
            let (batch, image) = make_batch(&items)?;
            let step = self
                .twin_step(&batch, &image, &mut stats)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {} batch {i}: {m}", stats.epoch)),
                    other => other,
                })?;
            sums[0] += step.0;
            sums[1] += step.1.unwrap_or(0.0);
            sums[2] += step.2.unwrap_or(0.0);
            if let Some(c) = step.3 {
                sums[3] += c;
                critic_steps += 1;
            }
        }
        let nb = n_batches as f64;
        stats.ce_fwd = sums[0] / nb;
        if self.backward.is_some() {
            stats.ce_bwd = Some(sums[1] / nb);
            stats.twin_l2 = Some(sums[2] / nb);
        }
        if self.critic.is_some() {
            stats.critic_loss = Some(sums[3] / critic_steps.max(1) as f64);
        }
        self.epoch += 1;
        Ok(stats)
    }

    /// Returns (ce_fwd, ce_bwd, twin_l2, mean critic loss of this batch).
    fn twin_step(
        &mut self,
        batch: &ParagraphBatch,
        image: &ImageBatch,
        stats: &mut EpochStats,
    ) -> Result<(f64, Option<f64>, Option<f64>, Option<f64>)> {
        let Some(backward) = &self.backward else {
            let ce = mle_step(&self.forward, batch, image, &mut self.opt_forward)?;
            stats.generator_updates += 1;
            return Ok((ce, None, None, None));
        };
        let twin = &self.twin_cfg;
        let fwd_params = self.forward.params();
        let bwd_params = backward.params();
        zero_grads(&fwd_params);
        zero_grads(&bwd_params);

        let (mut objective, ce_f, out_f) = mle_objective(&self.forward, batch, image)?;
        check_finite("forward cross-entropy", ce_f)?;
        let reversed = batch.reverse_targets(twin.per_sentence_reversal);
        let (obj_b, ce_b, out_b) = mle_objective(backward, &reversed, image)?;
        check_finite("backward cross-entropy", ce_b)?;

        let (fwd_seq, bwd_seq) = twin_alignment(batch, twin.per_sentence_reversal);
        let fwd_rows: Vec<usize> = fwd_seq.concat();
        let bwd_rows: Vec<usize> = bwd_seq.concat();
        let h_bwd = out_b.hidden.detach();
        let l2_target = if twin.detach_backward_l2 { &h_bwd } else { &out_b.hidden };
        let l2 = twin_l2_loss(&out_f.hidden, l2_target, &fwd_rows, &bwd_rows)?;
        let l2_value = l2.item();
        check_finite("twin L2", l2_value)?;
        if twin.mode.uses_l2() {
            objective = objective.add(&l2.scale(twin.lambda_l2))?;
        }

        let mut critic_mean = None;
        if let Some(critic) = &self.critic {
            let pf = Packing::new(&fwd_seq);
            let pb = Packing::new(&bwd_seq);
            let fake = pf.apply(&out_f.hidden.detach())?;
            let real = pb.apply(&h_bwd)?;
            let mut total = 0.0;
            for _ in 0..twin.critic_steps {
                let loss = critic_step(critic, &fake, &real, &pf, &pb, &mut self.opt_critic, twin.clip)?;
                check_finite("critic loss", loss)?;
                total += loss;
                stats.critic_updates += 1;
                let w = critic.max_abs_weight();
                stats.max_critic_weight = Some(stats.max_critic_weight.map_or(w, |m| m.max(w)));
            }
            critic_mean = Some(total / twin.critic_steps as f64);
            let adv = adversarial_generator_loss(critic, &pf.apply(&out_f.hidden)?, &pf)?;
            objective = objective.add(&adv.scale(twin.lambda_adv))?;
        }

        objective.add(&obj_b)?.backward()?;
        self.opt_forward.step(&fwd_params)?;
        self.opt_backward.step(&bwd_params)?;
        if let Some(critic) = &self.critic {
            zero_grads(&critic.params());
        }
        stats.generator_updates += 1;
        Ok((ce_f, Some(ce_b), Some(l2_value), critic_mean))
    }

    /// Every named tensor: parameters under `fwd.`, `bwd.`, `critic.` and
    /// optimiser accumulators under `opt.<which>.`.
    pub fn named_state(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let add_module = |prefix: &str, params: Vec<(String, Tensor)>, opt: &RmsProp, out: &mut Vec<_>| {
            for (name, p) in &params {
                out.push((format!("{prefix}.{name}"), p.shape().to_vec(), p.to_vec()));
            }
            for (name, p) in &params {
                if let Some(v) = opt.square_avg.get(name) {
                    out.push((format!("opt.{prefix}.{name}"), p.shape().to_vec(), v.clone()));
                }
            }
        };
        add_module("fwd", self.forward.params(), &self.opt_forward, &mut out);
        if let Some(b) = &self.backward {
            add_module("bwd", b.params(), &self.opt_backward, &mut out);
        }
        if let Some(c) = &self.critic {
            add_module("critic", c.params(), &self.opt_critic, &mut out);
        }
        out
    }

    /// Restores parameters and optimiser accumulators from [`named_state`].
    ///
    /// [`named_state`]: Trainer::named_state
    pub fn load_state(&mut self, entries: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        load_module("fwd", &self.forward.params(), entries)?;
        load_optimizer("fwd", &self.forward.params(), &mut self.opt_forward, entries);
        if let Some(b) = &self.backward {
            load_module("bwd", &b.params(), entries)?;
            load_optimizer("bwd", &b.params(), &mut self.opt_backward, entries);
        }
        if let Some(c) = &self.critic {
            load_module("critic", &c.params(), entries)?;
            load_optimizer("critic", &c.params(), &mut self.opt_critic, entries);
        }
        Ok(())
    }
}

/// Copies `prefix.<name>` entries into the module's parameters.
pub fn load_module(prefix: &str, params: &[(String, Tensor)], entries: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
    for (name, p) in params {
        let key = format!("{prefix}.{name}");
        let (shape, values) = entries
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        if shape.as_slice() != p.shape() {
            return Err(Error::Checkpoint(format!("{key}: shape {shape:?}, model expects {:?}", p.shape())));
        }
        p.data_mut().copy_from_slice(values);
    }
    Ok(())
}

fn load_optimizer(prefix: &str, params: &[(String, Tensor)], opt: &mut RmsProp, entries: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) {
    opt.square_avg.clear();
    for (name, _) in params {
        if let Some((_, v)) = entries.get(&format!("opt.{prefix}.{name}")) {
            opt.square_avg.insert(name.clone(), v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_sentences, EOS};
    use crate::tensor::{grad_check, grad_check_sampled};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            max_sentences: 2,
            max_words: 4,
            vocab_size: 11,
            feature_dim: 5,
            topic_depth: 2,
            word_depth: 3,
            attention_layers: vec![2],
            count_hidden: [6, 4],
            ..ModelConfig::default()
        }
        .with_width(8)
    }

    fn examples(seed: u64, count: usize, cfg: &ModelConfig) -> Vec<Example> {
        let mut rng = RngState::new(seed);
        (0..count)
            .map(|i| {
                let r = 1 + rng.below(3);
                let features = Tensor::new((0..r * cfg.feature_dim).map(|_| rng.uniform(-1.0, 1.0)).collect(), &[r, cfg.feature_dim]).unwrap();
                let sentences: Vec<Vec<usize>> = (0..1 + rng.below(cfg.max_sentences))
                    .map(|_| {
                        let mut s: Vec<usize> = (0..1 + rng.below(cfg.max_words - 1)).map(|_| 4 + rng.below(cfg.vocab_size - 4)).collect();
                        s.push(EOS);
                        s
                    })
                    .collect();
                Example {
                    id: format!("x{i}"),
                    features,
                    paragraph: encode_sentences(&sentences, cfg.max_sentences, cfg.max_words).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn rmsprop_zero_gradient_keeps_params() {
        let p = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let mut opt = RmsProp::new(0.1);
        opt.square_avg.insert("p".into(), vec![1.0, 1.0]);
        let params = vec![("p".to_string(), p.clone())];
        let f = p.scale(0.0).sum();
        f.backward().unwrap();
        opt.step(&params).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 2.0]);
        assert_eq!(opt.square_avg["p"], vec![0.9, 0.9]);
    }

    #[test]
    fn rmsprop_hand_evaluation() {
        let p = Tensor::param(vec![0.0], &[1]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        p.sum().backward().unwrap();
        let mut opt = RmsProp::new(0.1);
        opt.step(&params).unwrap();
        assert!((opt.square_avg["p"][0] - 0.1).abs() < 1e-15);
        let expected = -0.1 / (0.1f64.sqrt() + 1e-8);
        assert!((p.item() - expected).abs() < 1e-12);
        assert!((p.item() + 0.31623).abs() < 1e-5);
    }

    #[test]
    fn rmsprop_rejects_non_finite() {
        let p = Tensor::param(vec![1.0], &[1]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        p.ln().scale(f64::INFINITY).sum().backward().unwrap();
        let mut opt = RmsProp::new(0.1);
        assert!(matches!(opt.step(&params), Err(Error::NonFinite(_))));
        assert_eq!(p.to_vec(), vec![1.0]);
    }

    #[test]
    fn rmsprop_is_deterministic() {
        let run = || {
            let p = Tensor::param(vec![0.3, -0.7], &[2]).unwrap();
            let params = vec![("p".to_string(), p.clone())];
            let mut opt = RmsProp::new(0.01);
            for _ in 0..2 {
                zero_grads(&params);
                p.square().sum().backward().unwrap();
                opt.step(&params).unwrap();
            }
            p.to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn twin_l2_cases() {
        let mut rng = RngState::new(1);
        let h: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let hf = Tensor::new(h.clone(), &[3, 4]).unwrap();
        // backward rows stored in reverse order
        let mut rev = Vec::new();
        for r in (0..3).rev() {
            rev.extend_from_slice(&h[r * 4..(r + 1) * 4]);
        }
        let hb = Tensor::new(rev.clone(), &[3, 4]).unwrap();
        assert_eq!(twin_l2_loss(&hf, &hb, &[0, 1, 2], &[2, 1, 0]).unwrap().item(), 0.0);
        let shifted = Tensor::new(rev.iter().map(|v| v + 0.3).collect(), &[3, 4]).unwrap();
        let v = twin_l2_loss(&hf, &shifted, &[0, 1, 2], &[2, 1, 0]).unwrap().item();
        assert!((v - 0.09).abs() < 1e-12);
        let other: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let hb = Tensor::new(other.clone(), &[3, 4]).unwrap();
        let got = twin_l2_loss(&hf, &hb, &[0, 2], &[1, 0]).unwrap().item();
        let mut sum = 0.0;
        for (f, b) in [(0, 1), (2, 0)] {
            for k in 0..4 {
                sum += (h[f * 4 + k] - other[b * 4 + k]).powi(2);
            }
        }
        assert!((got - sum / 8.0).abs() < 1e-12);
        assert!(twin_l2_loss(&hf, &hb, &[0, 1], &[0]).is_err());
    }

    #[test]
    fn alignment_pairs_same_targets() {
        let p = encode_sentences(&[vec![4, 5, EOS], vec![6, EOS]], 3, 4).unwrap();
        let batch = ParagraphBatch::from_paragraphs(&[&p]).unwrap();
        let rev = batch.reverse_targets(false);
        for per_sentence in [false, true] {
            let rev = if per_sentence { batch.reverse_targets(true) } else { rev.clone() };
            let (f, b) = twin_alignment(&batch, per_sentence);
            for (fs, bs) in f.iter().zip(&b) {
                for (&i, &j) in fs.iter().zip(bs) {
                    assert_eq!(batch.tokens[i], rev.tokens[j]);
                }
            }
        }
    }

    fn small_critic(seed: u64) -> Critic {
        Critic::new(&mut RngState::new(seed), 3, 4)
    }

    #[test]
    fn constant_critic_has_zero_loss_and_gradient() {
        let critic = small_critic(2);
        for (_, p) in critic.params() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        critic.head.bias.as_ref().unwrap().data_mut()[0] = 0.7;
        let pf = Packing::new(&[vec![0, 1], vec![2]]);
        let pb = Packing::new(&[vec![1, 0, 2]]);
        let x = Tensor::param((0..9).map(|i| i as f64 * 0.1).collect(), &[3, 3]).unwrap();
        let loss = critic_loss(&critic, &pf.apply(&x).unwrap(), &pb.apply(&x).unwrap(), &pf, &pb).unwrap();
        assert_eq!(loss.item(), 0.0);
        let adv = adversarial_generator_loss(&critic, &pf.apply(&x).unwrap(), &pf).unwrap();
        assert_eq!(adv.item(), -0.7);
        adv.backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn critic_loss_is_mean_difference() {
        let critic = small_critic(3);
        let mut rng = RngState::new(4);
        let x = Tensor::new((0..15).map(|_| rng.uniform(-1.0, 1.0)).collect(), &[5, 3]).unwrap();
        let pf = Packing::new(&[vec![0, 1], vec![2, 3, 4]]);
        let pb = Packing::new(&[vec![4, 3], vec![1], vec![0, 2]]);
        let loss = critic_loss(&critic, &pf.apply(&x).unwrap(), &pb.apply(&x).unwrap(), &pf, &pb).unwrap().item();
        let single = |rows: &[usize]| {
            let seq = x.gather_rows(&rows.iter().map(|&r| Some(r)).collect::<Vec<_>>()).unwrap();
            critic.score(&seq, 1, &[rows.len()]).unwrap().item()
        };
        let fake = (single(&[0, 1]) + single(&[2, 3, 4])) / 2.0;
        let real = (single(&[4, 3]) + single(&[1]) + single(&[0, 2])) / 3.0;
        assert!((loss - (fake - real)).abs() < 1e-12);
    }

    #[test]
    fn critic_step_clips() {
        let critic = small_critic(5);
        let mut opt = RmsProp::new(0.5);
        let x = Tensor::new((0..9).map(|i| (i as f64).sin()).collect(), &[3, 3]).unwrap();
        let pf = Packing::new(&[vec![0, 1, 2]]);
        let pb = Packing::new(&[vec![2, 1, 0]]);
        for _ in 0..3 {
            critic_step(&critic, &pf.apply(&x).unwrap(), &pb.apply(&x).unwrap(), &pf, &pb, &mut opt, 0.01).unwrap();
            assert!(critic.max_abs_weight() <= 0.01);
        }
    }

    #[test]
    fn adversarial_gradient_matches_finite_differences() {
        let critic = small_critic(6);
        let pf = Packing::new(&[vec![0, 2], vec![1]]);
        let mut rng = RngState::new(7);
        let x = Tensor::param((0..9).map(|_| rng.uniform(-1.0, 1.0)).collect(), &[3, 3]).unwrap();
        let err = grad_check(|x| adversarial_generator_loss(&critic, &pf.apply(x)?, &pf), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        // raising the score lowers the loss
        let base = adversarial_generator_loss(&critic, &pf.apply(&x).unwrap(), &pf).unwrap().item();
        let b = critic.head.bias.as_ref().unwrap();
        b.data_mut()[0] += 0.1;
        let raised = adversarial_generator_loss(&critic, &pf.apply(&x).unwrap(), &pf).unwrap().item();
        assert!(raised < base);
    }

    #[test]
    fn twin_losses_gradcheck_on_tiny_model() {
        let cfg = tiny_config();
        let data = examples(8, 2, &cfg);
        let refs: Vec<&Example> = data.iter().collect();
        let (batch, image) = make_batch(&refs).unwrap();
        let fwd = ParaCnn::new(cfg.clone(), &mut RngState::new(9)).unwrap();
        let bwd = ParaCnn::new(cfg.clone(), &mut RngState::new(10)).unwrap();
        let critic = Critic::new(&mut RngState::new(11), cfg.channels, 4);
        let (fs, bs) = twin_alignment(&batch, false);
        let h_b = bwd.forward(&batch.reverse_targets(false), &image).unwrap().hidden.detach();
        let pf = Packing::new(&fs);
        let loss = || -> Result<Tensor> {
            let out = fwd.forward(&batch, &image)?;
            let ce = out.logits.cross_entropy(&batch.tokens, &batch.mask)?;
            let l2 = twin_l2_loss(&out.hidden, &h_b, &fs.concat(), &bs.concat())?;
            let adv = adversarial_generator_loss(&critic, &pf.apply(&out.hidden)?, &pf)?;
            ce.add(&l2)?.add(&adv.scale(0.5))
        };
        for (name, p) in fwd.params() {
            if name.starts_with("counter") {
                continue;
            }
            let coords: Vec<usize> = (0..p.numel()).step_by(p.numel().div_ceil(4)).collect();
            let err = grad_check_sampled(|_| loss(), &p, 1e-5, &coords).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let cfg = tiny_config();
        let data = examples(12, 4, &cfg);
        let model = ParaCnn::new(cfg.clone(), &mut RngState::new(13)).unwrap();
        let ce = evaluate_ce(&model, &data, 4).unwrap();
        let uniform = (cfg.vocab_size as f64).ln();
        assert!((ce - uniform).abs() < 0.1 * uniform, "{ce} vs {uniform}");
    }

    #[test]
    fn overfitting_one_batch_lowers_loss() {
        let cfg = tiny_config();
        let data = examples(14, 1, &cfg);
        let refs: Vec<&Example> = data.iter().collect();
        let (batch, image) = make_batch(&refs).unwrap();
        let model = ParaCnn::new(cfg, &mut RngState::new(15)).unwrap();
        let mut opt = RmsProp::new(1e-3);
        let first = mle_step(&model, &batch, &image, &mut opt).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = mle_step(&model, &batch, &image, &mut opt).unwrap();
        }
        assert!(last < first, "{last} vs {first}");
    }

    fn forward_values(t: &Trainer) -> Vec<f64> {
        t.forward.params().iter().flat_map(|(_, p)| p.to_vec()).collect()
    }

    #[test]
    fn twin_off_equals_zero_weight_l2() {
        let cfg = tiny_config();
        let data = examples(16, 6, &cfg);
        let train = TrainConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut a = Trainer::new(cfg.clone(), train.clone(), TwinConfig::default(), 3).unwrap();
        let mut b = Trainer::new(
            cfg,
            train,
            TwinConfig {
                mode: TwinMode::L2,
                lambda_l2: 0.0,
                ..TwinConfig::default()
            },
            3,
        )
        .unwrap();
        for _ in 0..3 {
            let sa = a.train_epoch(&data).unwrap();
            let sb = b.train_epoch(&data).unwrap();
            assert_eq!(sa.ce_fwd.to_bits(), sb.ce_fwd.to_bits());
        }
        assert_eq!(forward_values(&a), forward_values(&b));
    }

    #[test]
    fn mode_none_is_a_sequence_of_mle_steps() {
        let cfg = tiny_config();
        let data = examples(17, 5, &cfg);
        let train = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg.clone(), train.clone(), TwinConfig::default(), 4).unwrap();
        let order = t.epoch_order(0, data.len());
        t.train_epoch(&data).unwrap();
        let model = ParaCnn::new(cfg, &mut RngState::derive(4, STREAM_FORWARD)).unwrap();
        let mut opt = RmsProp::new(train.learning_rate);
        for chunk in order.chunks(2) {
            let items: Vec<&Example> = chunk.iter().map(|&k| &data[k]).collect();
            let (batch, image) = make_batch(&items).unwrap();
            mle_step(&model, &batch, &image, &mut opt).unwrap();
        }
        let direct: Vec<f64> = model.params().iter().flat_map(|(_, p)| p.to_vec()).collect();
        assert_eq!(direct, forward_values(&t));
    }

    #[test]
    fn adversarial_schedule_and_clipping() {
        let cfg = tiny_config();
        let data = examples(18, 6, &cfg);
        let train = TrainConfig {
            batch_size: 3,
            ..TrainConfig::default()
        };
        let twin = TwinConfig {
            mode: TwinMode::L2PlusAdversarial,
            critic_hidden: 4,
            ..TwinConfig::default()
        };
        let mut t = Trainer::new(cfg, train, twin, 5).unwrap();
        let s = t.train_epoch(&data).unwrap();
        assert_eq!(s.generator_updates, 2);
        assert_eq!(s.critic_updates, 10);
        assert!(s.max_critic_weight.unwrap() <= 0.01);
        assert!(s.ce_bwd.is_some() && s.twin_l2.is_some() && s.critic_loss.is_some());
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let cfg = tiny_config();
        let data = examples(19, 4, &cfg);
        let train = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let twin = TwinConfig {
            mode: TwinMode::L2PlusAdversarial,
            critic_hidden: 4,
            ..TwinConfig::default()
        };
        let mut full = Trainer::new(cfg.clone(), train.clone(), twin.clone(), 6).unwrap();
        full.train_epoch(&data).unwrap();
        let saved: BTreeMap<_, _> = full.named_state().into_iter().map(|(n, s, v)| (n, (s, v))).collect();
        let last = full.train_epoch(&data).unwrap();
        let mut resumed = Trainer::new(cfg, train, twin, 6).unwrap();
        resumed.load_state(&saved).unwrap();
        resumed.epoch = 1;
        let again = resumed.train_epoch(&data).unwrap();
        assert_eq!(last, again);
        assert_eq!(full.named_state(), resumed.named_state());
    }
}
