//! The hierarchical convolutional paragraph generator.
//!
//! A topic stack produces one topic vector per sentence from the pooled image
//! feature, the previous topic and a context vector pooled from the previous
//! sentence. A word stack then predicts every sentence conditioned on its
//! topic, attending to the image regions after selected layers.
//!
//! Batched tensors are laid out item-major: rows of item `b`, sentence `j`,
//! position `i` sit at `(b·M + j)·N + i`.

use serde::{Deserialize, Serialize};

use crate::corpus::ParagraphBatch;
use crate::error::{Error, Result};
use crate::layers::{join, init_param, CausalConvBlock, Embedding, Linear, Module, MultiHeadSelfAttention, VisualAttention};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    SelfAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub max_sentences: usize,
    pub max_words: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub projection_dim: usize,
    pub topic_dim: usize,
    pub embedding_dim: usize,
    /// Must equal `embedding_dim`: contexts are pooled word embeddings.
    pub context_dim: usize,
    pub channels: usize,
    pub topic_kernel: usize,
    pub word_kernel: usize,
    pub topic_depth: usize,
    pub word_depth: usize,
    pub pooling: Pooling,
    pub attention_heads: usize,
    /// 1-based word layers followed by visual attention.
    pub attention_layers: Vec<usize>,
    pub attention_dim: usize,
    pub count_hidden: [usize; 2],
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_sentences: 6,
            max_words: 30,
            vocab_size: 8668,
            feature_dim: 4096,
            projection_dim: 512,
            topic_dim: 512,
            embedding_dim: 512,
            context_dim: 512,
            channels: 512,
            topic_kernel: 5,
            word_kernel: 5,
            topic_depth: 4,
            word_depth: 5,
            pooling: Pooling::Mean,
            attention_heads: 8,
            attention_layers: vec![2, 4],
            attention_dim: 512,
            count_hidden: [256, 128],
            residual: true,
        }
    }
}

impl ModelConfig {
    /// Every hidden width set to `width`.
    pub fn with_width(mut self, width: usize) -> Self {
        self.projection_dim = width;
        self.topic_dim = width;
        self.embedding_dim = width;
        self.context_dim = width;
        self.channels = width;
        self.attention_dim = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("max_sentences", self.max_sentences),
            ("max_words", self.max_words),
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("projection_dim", self.projection_dim),
            ("topic_dim", self.topic_dim),
            ("embedding_dim", self.embedding_dim),
            ("context_dim", self.context_dim),
            ("channels", self.channels),
            ("topic_kernel", self.topic_kernel),
            ("word_kernel", self.word_kernel),
            ("topic_depth", self.topic_depth),
            ("word_depth", self.word_depth),
            ("attention_dim", self.attention_dim),
            ("count_hidden[0]", self.count_hidden[0]),
            ("count_hidden[1]", self.count_hidden[1]),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.max_words < 2 {
            return Err(Error::Config("max_words must leave room for <eos>".into()));
        }
        if self.context_dim != self.embedding_dim {
            return Err(Error::Config(format!(
                "context_dim {} must equal embedding_dim {}",
                self.context_dim, self.embedding_dim
            )));
        }
        if let Some(&l) = self.attention_layers.iter().find(|&&l| l == 0 || l >= self.word_depth) {
            return Err(Error::Config(format!(
                "attention layer {l} outside 1..{} (word depth {})",
                self.word_depth, self.word_depth
            )));
        }
        if self.pooling == Pooling::SelfAttention && self.embedding_dim % self.attention_heads.max(1) != 0 {
            return Err(Error::Config(format!(
                "embedding_dim {} not divisible by {} heads",
                self.embedding_dim, self.attention_heads
            )));
        }
        Ok(())
    }
}

/// Region features of a batch, zero-padded to the largest region count.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    /// `[B·R_max × d_I]`.
    pub features: Tensor,
    pub region_counts: Vec<usize>,
    pub max_regions: usize,
}

impl ImageBatch {
    pub fn from_features(items: &[&Tensor]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyCorpus)?;
        let d = first.shape()[1];
        let max_regions = items.iter().map(|t| t.shape()[0]).max().unwrap_or(1);
        let mut data = vec![0.0; items.len() * max_regions * d];
        let mut counts = Vec::with_capacity(items.len());
        for (b, t) in items.iter().enumerate() {
            if t.rank() != 2 || t.shape()[1] != d {
                return Err(Error::ShapeMismatch {
                    op: "image_batch",
                    lhs: t.shape().to_vec(),
                    rhs: vec![d],
                });
            }
            let r = t.shape()[0];
            let start = b * max_regions * d;
            data[start..start + r * d].copy_from_slice(&t.data());
            counts.push(r);
        }
        Ok(Self {
            features: Tensor::new(data, &[items.len() * max_regions, d])?,
            region_counts: counts,
            max_regions,
        })
    }

    pub fn len(&self) -> usize {
        self.region_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region_counts.is_empty()
    }
}

/// Projected image: pooled vector per item plus projected regions.
#[derive(Debug, Clone)]
pub struct Projected {
    /// `[B × d]`.
    pub global: Tensor,
    /// `[B·R_max × d]`.
    pub regions: Tensor,
    pub region_mask: Option<Vec<bool>>,
    pub batch: usize,
}

/// Topics and contexts produced so far, one `[B × dim]` tensor per slot.
pub struct TopicState {
    batch: usize,
    capacity: usize,
    frames: Vec<Tensor>,
    topics: Vec<Tensor>,
    contexts: Vec<Tensor>,
}

impl TopicState {
    pub fn new(batch: usize, capacity: usize) -> Self {
        Self {
            batch,
            capacity,
            frames: Vec::new(),
            topics: Vec::new(),
            contexts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn topics(&self) -> &[Tensor] {
        &self.topics
    }

    pub fn contexts(&self) -> &[Tensor] {
        &self.contexts
    }

    /// All topics as `[B·j × dim]`, item-major.
    pub fn stacked(&self) -> Result<Tensor> {
        interleave(&self.topics, self.batch)
    }
}

/// Slot-major list of `[B × d]` tensors → item-major `[B·S × d]`.
fn interleave(slots: &[Tensor], batch: usize) -> Result<Tensor> {
    let s = slots.len();
    let stacked = Tensor::concat(slots, 0)?;
    if s == 1 {
        return Ok(stacked);
    }
    let idx: Vec<Option<usize>> = (0..batch * s).map(|r| Some((r % s) * batch + r / s)).collect();
    stacked.gather_rows(&idx)
}

fn pick_rows(batch: usize, f: impl Fn(usize) -> usize) -> Vec<Option<usize>> {
    (0..batch).map(|b| Some(f(b))).collect()
}

/// Three-layer classifier from the pooled image feature to a sentence count.
#[derive(Clone)]
pub struct SentenceCountPredictor {
    pub layers: [Linear; 3],
}

impl SentenceCountPredictor {
    pub fn new(rng: &mut RngState, input: usize, hidden: [usize; 2], classes: usize) -> Self {
        Self {
            layers: [
                Linear::new(rng, input, hidden[0]),
                Linear::new(rng, hidden[0], hidden[1]),
                Linear::new(rng, hidden[1], classes),
            ],
        }
    }

    pub fn classes(&self) -> usize {
        self.layers[2].output_dim()
    }

    /// `[B × d]` → `[B × M_max]` logits; class `i` means `i + 1` sentences.
    pub fn forward(&self, global: &Tensor) -> Result<Tensor> {
        let h = self.layers[0].forward(global)?.relu();
        let h = self.layers[1].forward(&h)?.relu();
        self.layers[2].forward(&h)
    }

    /// Cross-entropy against true counts (clamped into the class range).
    pub fn loss(&self, global: &Tensor, counts: &[usize]) -> Result<Tensor> {
        let k = self.classes();
        let targets: Vec<usize> = counts.iter().map(|&c| c.clamp(1, k) - 1).collect();
        self.forward(global)?.cross_entropy(&targets, &vec![true; counts.len()])
    }

    pub fn predict(&self, global: &Tensor, min: usize, max: usize) -> Result<Vec<usize>> {
        let logits = self.forward(global)?;
        let k = self.classes();
        let data = logits.data();
        Ok(data.chunks(k).map(|row| count_from_logits(row, min, max)).collect())
    }
}

/// Argmax (lowest index on ties) as a 1-based count, clamped to `[min, max]`.
pub fn count_from_logits(logits: &[f64], min: usize, max: usize) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    (best + 1).clamp(min, max)
}

struct AttentionSite {
    layer: usize,
    attention: VisualAttention,
    proj: Linear,
}

/// Teacher-forced outputs of a full paragraph pass.
pub struct ParagraphOutput {
    /// `[B·M·N × V]`.
    pub logits: Tensor,
    /// `[B·M·N × C]`, the frames fed to the vocabulary projection.
    pub hidden: Tensor,
    /// `[B·M × topic_dim]`.
    pub topics: Tensor,
    /// `[B·M × context_dim]`.
    pub contexts: Tensor,
    pub image: Projected,
}

pub struct ParaCnn {
    cfg: ModelConfig,
    feature_proj: Linear,
    topic_start: Tensor,
    topic_feed: Linear,
    topic_input: Linear,
    topic_layers: Vec<CausalConvBlock>,
    embedding: Embedding,
    self_attention: Option<MultiHeadSelfAttention>,
    word_input: Linear,
    word_layers: Vec<CausalConvBlock>,
    attention: Vec<AttentionSite>,
    output: Linear,
    pub counter: SentenceCountPredictor,
}

impl ParaCnn {
    pub fn new(cfg: ModelConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let c = &cfg;
        let feature_proj = Linear::new(rng, c.feature_dim, c.projection_dim);
        let topic_start = init_param(rng, &[1, c.topic_dim], c.topic_dim);
        let topic_feed = Linear::new(rng, c.topic_dim, c.topic_dim);
        let topic_input = Linear::new(rng, c.topic_dim + c.projection_dim + c.context_dim, c.topic_dim);
        let topic_layers = (0..c.topic_depth)
            .map(|_| CausalConvBlock::new(rng, c.topic_kernel, c.topic_dim, c.topic_dim, c.residual))
            .collect();
        let embedding = Embedding::new(rng, c.vocab_size, c.embedding_dim);
        let self_attention = match c.pooling {
            Pooling::Mean => None,
            Pooling::SelfAttention => Some(MultiHeadSelfAttention::new(rng, c.embedding_dim, c.attention_heads)?),
        };
        let word_input = Linear::new(rng, c.embedding_dim + c.topic_dim, c.channels);
        let mut word_layers = Vec::with_capacity(c.word_depth);
        let mut attention = Vec::new();
        for l in 1..=c.word_depth {
            word_layers.push(CausalConvBlock::new(rng, c.word_kernel, c.channels, c.channels, c.residual));
            if c.attention_layers.contains(&l) {
                attention.push(AttentionSite {
                    layer: l,
                    attention: VisualAttention::new(rng, c.channels, c.projection_dim, c.attention_dim),
                    proj: Linear::new(rng, c.projection_dim, c.channels),
                });
            }
        }
        let output = Linear::new(rng, c.channels, c.vocab_size);
        let counter = SentenceCountPredictor::new(rng, c.projection_dim, c.count_hidden, c.max_sentences);
        Ok(Self {
            cfg,
            feature_proj,
            topic_start,
            topic_feed,
            topic_input,
            topic_layers,
            embedding,
            self_attention,
            word_input,
            word_layers,
            attention,
            output,
            counter,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// The vocabulary projection, exposed so tests can pin the output.
    pub fn output_layer(&self) -> &Linear {
        &self.output
    }

    pub fn project_features(&self, image: &ImageBatch) -> Result<Projected> {
        let regions = self.feature_proj.forward(&image.features)?;
        let global = regions.segment_max(image.max_regions, &image.region_counts)?;
        let full = image.region_counts.iter().all(|&r| r == image.max_regions);
        let region_mask = (!full).then(|| {
            image
                .region_counts
                .iter()
                .flat_map(|&r| (0..image.max_regions).map(move |i| i < r))
                .collect()
        });
        Ok(Projected {
            global,
            regions,
            region_mask,
            batch: image.len(),
        })
    }

    /// Single image `[R × d_I]` → (`[d]` pooled, `[R × d]` regions).
    pub fn project_single(&self, raw: &Tensor) -> Result<(Tensor, Tensor)> {
        let p = self.project_features(&ImageBatch::from_features(&[raw])?)?;
        let d = self.cfg.projection_dim;
        Ok((p.global.reshape(&[d])?, p.regions))
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        self.embedding.forward(tokens)
    }

    /// Pools each of the `S` segments of length `n` in `embeds: [S·n × e]`
    /// over its valid rows. Segments without valid rows pool to zero.
    pub fn pool_sentences(&self, embeds: &Tensor, mask: &[bool], n: usize) -> Result<Tensor> {
        let rows = embeds.shape()[0];
        if n == 0 || rows % n != 0 || mask.len() != rows {
            return Err(Error::InvalidShape {
                op: "pool_sentences",
                msg: format!("{rows} rows, segment {n}, mask {}", mask.len()),
            });
        }
        let segments = rows / n;
        let mut entries = Vec::new();
        for s in 0..segments {
            let valid: Vec<usize> = (s * n..(s + 1) * n).filter(|&r| mask[r]).collect();
            let w = 1.0 / valid.len().max(1) as f64;
            entries.extend(valid.into_iter().map(|r| (s, r, w)));
        }
        let source = match &self.self_attention {
            None => embeds.clone(),
            Some(att) => {
                if entries.is_empty() {
                    embeds.clone()
                } else {
                    att.forward(embeds, segments, Some(mask))?.0
                }
            }
        };
        source.combine_rows(segments, &entries)
    }

    /// Context vector of one previous sentence, given its tokens.
    pub fn pool_context(&self, previous: Option<&[usize]>) -> Result<Tensor> {
        let e = self.cfg.embedding_dim;
        match previous {
            Some(tokens) if !tokens.is_empty() => {
                let emb = self.embed(tokens)?;
                self.pool_sentences(&emb, &vec![true; tokens.len()], tokens.len())
            }
            _ => {
                log::debug!("empty previous sentence; using zero context");
                Ok(Tensor::zeros(&[1, e]))
            }
        }
    }

    /// Computes the next topic for every item from `global: [B × d]` and
    /// `context: [B × e]`.
    pub fn topic_forward(&self, state: &mut TopicState, global: &Tensor, context: &Tensor) -> Result<Tensor> {
        let b = state.batch;
        if state.len() >= state.capacity {
            return Err(Error::IndexOutOfRange {
                op: "topic_forward",
                index: state.len() + 1,
                limit: state.capacity,
            });
        }
        let feed = match state.topics.last() {
            None => self.topic_start.gather_rows(&vec![Some(0); b])?,
            Some(prev) => self.topic_feed.forward(prev)?,
        };
        let frame = self
            .topic_input
            .forward(&Tensor::concat(&[feed, global.clone(), context.clone()], 1)?)?;
        state.frames.push(frame);
        state.contexts.push(context.clone());
        let j = state.frames.len();
        let mut h = interleave(&state.frames, b)?;
        for layer in &self.topic_layers {
            h = layer.forward(&h, j)?;
        }
        let topic = h.gather_rows(&pick_rows(b, |i| i * j + j - 1))?;
        state.topics.push(topic.clone());
        Ok(topic)
    }

    /// Topics for `m` slots from per-slot contexts `[B·m × e]`, returned
    /// item-major `[B·m × topic_dim]`.
    pub fn topics(&self, global: &Tensor, contexts: &Tensor, m: usize) -> Result<Tensor> {
        let b = global.shape()[0];
        let mut state = TopicState::new(b, m);
        for j in 0..m {
            let ctx = contexts.gather_rows(&pick_rows(b, |i| i * m + j))?;
            self.topic_forward(&mut state, global, &ctx)?;
        }
        state.stacked()
    }

    /// Word stack over `S` segments of `seg_len` input tokens; `topic_rows`
    /// holds the topic for every row. Segments of one image must be
    /// contiguous and every image must own the same number of rows.
    fn word_stack(&self, inputs: &[usize], topic_rows: &Tensor, seg_len: usize, image: &Projected) -> Result<(Tensor, Tensor)> {
        let emb = self.embed(inputs)?;
        let mut h = self.word_input.forward(&Tensor::concat(&[emb, topic_rows.clone()], 1)?)?;
        let mut sites = self.attention.iter().peekable();
        for (l, layer) in self.word_layers.iter().enumerate() {
            h = layer.forward(&h, seg_len)?;
            if let Some(site) = sites.next_if(|s| s.layer == l + 1) {
                let (ctx, _) = site
                    .attention
                    .forward(&h, &image.regions, image.batch, image.region_mask.as_deref())?;
                h = h.add(&site.proj.forward(&ctx)?)?;
            }
        }
        Ok((self.output.forward(&h)?, h))
    }

    /// Logits `[t × V]` and hidden frames for one sentence of a single image.
    pub fn sentence_forward(&self, topic: &Tensor, prefix: &[usize], image: &Projected) -> Result<(Tensor, Tensor)> {
        if prefix.is_empty() {
            return Err(Error::InvalidShape {
                op: "sentence_forward",
                msg: "empty prefix".into(),
            });
        }
        if image.batch != 1 {
            return Err(Error::InvalidShape {
                op: "sentence_forward",
                msg: format!("expected one image, got {}", image.batch),
            });
        }
        let topic = topic.reshape(&[1, self.cfg.topic_dim])?;
        let rows = topic.gather_rows(&vec![Some(0); prefix.len()])?;
        self.word_stack(prefix, &rows, prefix.len(), image)
    }

    /// Teacher-forced pass over a batch.
    pub fn forward(&self, batch: &ParagraphBatch, image: &ImageBatch) -> Result<ParagraphOutput> {
        let (b, m, n) = (batch.batch, batch.max_sentences, batch.max_words);
        if image.len() != b {
            return Err(Error::InvalidShape {
                op: "paragraph_forward",
                msg: format!("{b} paragraphs but {} images", image.len()),
            });
        }
        let projected = self.project_features(image)?;
        let target_emb = self.embed(&batch.tokens)?;
        let pooled = self.pool_sentences(&target_emb, &batch.mask, n)?;
        let prev: Vec<Option<usize>> = (0..b * m).map(|r| (r % m > 0).then(|| r - 1)).collect();
        let contexts = pooled.gather_rows(&prev)?;
        let topics = self.topics(&projected.global, &contexts, m)?;
        let topic_rows = topics.gather_rows(&(0..b * m * n).map(|r| Some(r / n)).collect::<Vec<_>>())?;
        let (logits, hidden) = self.word_stack(&batch.input_tokens(), &topic_rows, n, &projected)?;
        Ok(ParagraphOutput {
            logits,
            hidden,
            topics,
            contexts,
            image: projected,
        })
    }

    /// Mean cross-entropy over valid target positions.
    pub fn loss(&self, batch: &ParagraphBatch, image: &ImageBatch) -> Result<(Tensor, ParagraphOutput)> {
        let out = self.forward(batch, image)?;
        let ce = out.logits.cross_entropy(&batch.tokens, &batch.mask)?;
        Ok((ce, out))
    }
}

impl Module for AttentionSite {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.attention.collect_params(prefix, out);
        self.proj.collect_params(&join(prefix, "proj"), out);
    }
}

impl Module for SentenceCountPredictor {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_params(&join(prefix, &format!("layer{i}")), out);
        }
    }
}

impl Module for ParaCnn {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.feature_proj.collect_params(&join(prefix, "feature_proj"), out);
        out.push((join(prefix, "topic.start"), self.topic_start.clone()));
        self.topic_feed.collect_params(&join(prefix, "topic.feed"), out);
        self.topic_input.collect_params(&join(prefix, "topic.input"), out);
        for (i, l) in self.topic_layers.iter().enumerate() {
            l.collect_params(&join(prefix, &format!("topic.conv{i}")), out);
        }
        self.embedding.collect_params(&join(prefix, "embedding"), out);
        if let Some(att) = &self.self_attention {
            att.collect_params(&join(prefix, "context.self_attention"), out);
        }
        self.word_input.collect_params(&join(prefix, "word.input"), out);
        for (i, l) in self.word_layers.iter().enumerate() {
            l.collect_params(&join(prefix, &format!("word.conv{i}")), out);
        }
        for site in &self.attention {
            site.collect_params(&join(prefix, &format!("word.attention{}", site.layer)), out);
        }
        self.output.collect_params(&join(prefix, "word.output"), out);
        self.counter.collect_params(&join(prefix, "counter"), out);
    }
}
