//! Neural building blocks on top of [`Tensor`].
//!
//! Sequence-shaped inputs are 2-D `[rows × channels]` tensors in which rows
//! are grouped into equal-length segments (one segment per sentence or per
//! paragraph). Every layer processes all segments of a batch in one pass.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Anything that owns trainable tensors.
pub trait Module {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in) initialised parameter.
pub fn init_param(rng: &mut RngState, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::param(data, shape).expect("positive shape")
}

/// Additive mask row: 0 where valid, a large negative number elsewhere.
pub(crate) const MASKED: f64 = -1e30;

#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut RngState, input: usize, output: usize) -> Self {
        let weight = init_param(rng, &[input, output], input);
        let bias = Some(init_param(rng, &[output], input));
        Self { weight, bias }
    }

    pub fn without_bias(rng: &mut RngState, input: usize, output: usize) -> Self {
        let weight = init_param(rng, &[input, output], input);
        Self { weight, bias: None }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Causal 1-D convolution with a gated linear unit.
///
/// The weight is stored im2col-style as `[k·in × 2·out]`: row block `j`
/// multiplies the frame `k−1−j` steps in the past. The first `out` output
/// columns are the linear half, the remaining `out` the gate.
#[derive(Clone)]
pub struct CausalConvBlock {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub residual: bool,
}

impl CausalConvBlock {
    pub fn new(rng: &mut RngState, kernel: usize, in_channels: usize, out_channels: usize, residual: bool) -> Self {
        let fan_in = kernel * in_channels;
        Self {
            kernel,
            in_channels,
            out_channels,
            weight: init_param(rng, &[fan_in, 2 * out_channels], fan_in),
            bias: init_param(rng, &[2 * out_channels], fan_in),
            residual,
        }
    }

    /// `x: [S·T × in]` made of `S` independent segments of length `seg_len`.
    pub fn forward(&self, x: &Tensor, seg_len: usize) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "causal_conv",
                lhs: x.shape().to_vec(),
                rhs: vec![self.in_channels],
            });
        }
        let y = x
            .causal_unfold(seg_len, self.kernel)?
            .matmul(&self.weight)?
            .add(&self.bias)?
            .glu()?;
        if self.residual && self.in_channels == self.out_channels {
            x.add(&y)
        } else {
            Ok(y)
        }
    }
}

impl Module for CausalConvBlock {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

/// Token table followed by a trainable affine map.
#[derive(Clone)]
pub struct Embedding {
    pub table: Tensor,
    pub proj: Linear,
}

impl Embedding {
    pub fn new(rng: &mut RngState, vocab: usize, dim: usize) -> Self {
        Self {
            table: init_param(rng, &[vocab, dim], vocab),
            proj: Linear::new(rng, dim, dim),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let v = self.vocab_size();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::IndexOutOfRange {
                op: "embedding",
                index: bad,
                limit: v,
            });
        }
        let index: Vec<Option<usize>> = tokens.iter().map(|&t| Some(t)).collect();
        self.proj.forward(&self.table.gather_rows(&index)?)
    }
}

impl Module for Embedding {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "table"), self.table.clone()));
        self.proj.collect_params(&join(prefix, "proj"), out);
    }
}

/// Additive soft attention over image regions:
/// `e_r = vᵀ tanh(W_h h + W_v V_r)`, weights = softmax(e).
#[derive(Clone)]
pub struct VisualAttention {
    pub w_h: Linear,
    pub w_v: Linear,
    pub score: Tensor,
}

impl VisualAttention {
    pub fn new(rng: &mut RngState, query_dim: usize, region_dim: usize, attn_dim: usize) -> Self {
        Self {
            w_h: Linear::without_bias(rng, query_dim, attn_dim),
            w_v: Linear::without_bias(rng, region_dim, attn_dim),
            score: init_param(rng, &[attn_dim, 1], attn_dim),
        }
    }

    /// Single query vector against `[R × d_v]` regions.
    pub fn attend(&self, h: &Tensor, regions: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = h.reshape(&[1, h.numel()])?;
        let r = regions.shape()[0];
        let d_v = regions.shape()[1];
        let (ctx, w) = self.forward(&h, regions, 1, None)?;
        Ok((ctx.reshape(&[d_v])?, w.reshape(&[r])?))
    }

    /// `queries: [B·n × d_h]`, `regions: [B·R × d_v]` split into `batch`
    /// groups; `region_mask` (length `B·R`) marks real regions. Returns the
    /// attended context `[B·n × d_v]` and the weights `[B·n × R]`.
    pub fn forward(
        &self,
        queries: &Tensor,
        regions: &Tensor,
        batch: usize,
        region_mask: Option<&[bool]>,
    ) -> Result<(Tensor, Tensor)> {
        let rows = queries.shape()[0];
        let (total_regions, d_v) = (regions.shape()[0], regions.shape()[1]);
        if batch == 0 || rows % batch != 0 || total_regions % batch != 0 || total_regions == 0 {
            return Err(Error::InvalidShape {
                op: "visual_attention",
                msg: format!("{rows} queries, {total_regions} regions, batch {batch}"),
            });
        }
        let (n, r) = (rows / batch, total_regions / batch);
        let hq = self.w_h.forward(queries)?;
        let vk = self.w_v.forward(regions)?;
        let mut scores = hq
            .pairwise_add(&vk, batch)?
            .tanh()
            .matmul(&self.score)?
            .reshape(&[rows, r])?;
        if let Some(mask) = region_mask {
            let mut add = vec![0.0; rows * r];
            for b in 0..batch {
                for j in 0..r {
                    if !mask[b * r + j] {
                        for i in 0..n {
                            add[(b * n + i) * r + j] = MASKED;
                        }
                    }
                }
            }
            scores = scores.add(&Tensor::new(add, &[rows, r])?)?;
        }
        let weights = scores.softmax(1)?;
        let ctx = weights
            .reshape(&[batch, n, r])?
            .bmm(&regions.reshape(&[batch, r, d_v])?, false)?
            .reshape(&[rows, d_v])?;
        Ok((ctx, weights))
    }
}

impl Module for VisualAttention {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.w_h.collect_params(&join(prefix, "w_h"), out);
        self.w_v.collect_params(&join(prefix, "w_v"), out);
        out.push((join(prefix, "score"), self.score.clone()));
    }
}

/// Scaled dot-product attention with `heads` heads, full (non-causal)
/// within each segment.
#[derive(Clone)]
pub struct MultiHeadSelfAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadSelfAttention {
    pub fn new(rng: &mut RngState, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dimension {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            query: Linear::new(rng, dim, dim),
            key: Linear::new(rng, dim, dim),
            value: Linear::new(rng, dim, dim),
            output: Linear::new(rng, dim, dim),
        })
    }

    /// `x: [G·T × d]` in `groups` segments; `key_mask` (length `G·T`) hides
    /// padded keys. Returns the output and per-head weights `[G × T × T]`.
    pub fn forward(&self, x: &Tensor, groups: usize, key_mask: Option<&[bool]>) -> Result<(Tensor, Vec<Tensor>)> {
        let (rows, d) = (x.shape()[0], x.shape()[1]);
        if d % self.heads != 0 {
            return Err(Error::Config(format!("dimension {d} not divisible by {} heads", self.heads)));
        }
        if groups == 0 || rows % groups != 0 {
            return Err(Error::InvalidShape {
                op: "self_attention",
                msg: format!("{rows} rows in {groups} groups"),
            });
        }
        let t = rows / groups;
        let dh = d / self.heads;
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let v = self.value.forward(x)?;
        let mask = match key_mask {
            Some(m) => {
                let mut add = vec![0.0; groups * t * t];
                for g in 0..groups {
                    for j in 0..t {
                        if !m[g * t + j] {
                            for i in 0..t {
                                add[(g * t + i) * t + j] = MASKED;
                            }
                        }
                    }
                }
                Some(Tensor::new(add, &[groups, t, t])?)
            }
            None => None,
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let head = |m: &Tensor| m.slice(1, h * dh, (h + 1) * dh)?.reshape(&[groups, t, dh]);
            let mut s = head(&q)?.bmm(&head(&k)?, true)?.scale(scale);
            if let Some(mask) = &mask {
                s = s.add(mask)?;
            }
            let w = s.softmax(2)?;
            outs.push(w.bmm(&head(&v)?, false)?.reshape(&[rows, dh])?);
            weights.push(w);
        }
        let joined = if outs.len() == 1 { outs.pop().unwrap() } else { Tensor::concat(&outs, 1)? };
        Ok((self.output.forward(&joined)?, weights))
    }
}

impl Module for MultiHeadSelfAttention {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.query.collect_params(&join(prefix, "query"), out);
        self.key.collect_params(&join(prefix, "key"), out);
        self.value.collect_params(&join(prefix, "value"), out);
        self.output.collect_params(&join(prefix, "output"), out);
    }
}

/// One direction of a gated recurrent unit. Gate order in the stacked
/// `3h` columns: reset, update, candidate.
#[derive(Clone)]
pub struct GruDirection {
    pub input: Linear,
    pub hidden: Linear,
}

impl GruDirection {
    pub fn new(rng: &mut RngState, input: usize, hidden: usize) -> Self {
        Self {
            input: Linear::new(rng, input, 3 * hidden),
            hidden: Linear::new(rng, hidden, 3 * hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden.input_dim()
    }

    /// `r = σ(x_r + h_r)`, `z = σ(x_z + h_z)`, `n = tanh(x_n + r ⊙ h_n)`,
    /// `h' = (1 − z) ⊙ n + z ⊙ h`.
    fn step(&self, x_proj: &Tensor, h: &Tensor) -> Result<Tensor> {
        let hs = self.hidden_size();
        let hp = self.hidden.forward(h)?;
        let r = x_proj.slice(1, 0, hs)?.add(&hp.slice(1, 0, hs)?)?.sigmoid();
        let z = x_proj.slice(1, hs, 2 * hs)?.add(&hp.slice(1, hs, 2 * hs)?)?.sigmoid();
        let n = x_proj
            .slice(1, 2 * hs, 3 * hs)?
            .add(&r.mul(&hp.slice(1, 2 * hs, 3 * hs)?)?)?
            .tanh();
        n.add(&z.mul(&h.sub(&n)?)?)
    }

    /// Runs over `[B·L × d]` (segments of `L`) in the given direction.
    /// Steps at or beyond `lengths[b]` leave the state untouched, so the
    /// reverse direction effectively starts at each sequence's last element.
    /// Returns per-step states `[B·L × h]` and the final state `[B × h]`.
    fn run(&self, x: &Tensor, batch: usize, lengths: &[usize], reverse: bool) -> Result<(Tensor, Tensor)> {
        let seg = x.shape()[0] / batch;
        let hs = self.hidden_size();
        let xp = self.input.forward(x)?;
        let mut h = Tensor::zeros(&[batch, hs]);
        let mut states: Vec<Option<Tensor>> = vec![None; seg];
        let order: Vec<usize> = if reverse { (0..seg).rev().collect() } else { (0..seg).collect() };
        for t in order {
            let idx: Vec<Option<usize>> = (0..batch).map(|b| Some(b * seg + t)).collect();
            let xt = xp.gather_rows(&idx)?;
            let next = self.step(&xt, &h)?;
            let live: Vec<f64> = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            h = if live.iter().all(|&m| m == 1.0) {
                next
            } else {
                let m = Tensor::new(live, &[batch, 1])?;
                h.add(&next.sub(&h)?.mul(&m)?)?
            };
            states[t] = Some(h.clone());
        }
        // t-major stack → b-major rows
        let stacked = Tensor::concat(&states.into_iter().map(|s| s.expect("every step visited")).collect::<Vec<_>>(), 0)?;
        let idx: Vec<Option<usize>> = (0..batch * seg).map(|r| Some((r % seg) * batch + r / seg)).collect();
        Ok((stacked.gather_rows(&idx)?, h))
    }
}

impl Module for GruDirection {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.input.collect_params(&join(prefix, "input"), out);
        self.hidden.collect_params(&join(prefix, "hidden"), out);
    }
}

/// Single-layer bidirectional GRU.
#[derive(Clone)]
pub struct BiGruCell {
    pub forward_dir: GruDirection,
    pub backward_dir: GruDirection,
}

impl BiGruCell {
    pub fn new(rng: &mut RngState, input: usize, hidden: usize) -> Self {
        Self {
            forward_dir: GruDirection::new(rng, input, hidden),
            backward_dir: GruDirection::new(rng, input, hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.forward_dir.hidden_size()
    }

    /// `seq: [T × d]` → outputs `[T × 2h]`, final `[2h]`.
    pub fn forward(&self, seq: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = seq.shape()[0];
        let (out, fin) = self.forward_batch(seq, 1, &[t])?;
        let h2 = fin.numel();
        Ok((out, fin.reshape(&[h2])?))
    }

    /// Batched over `[B·L × d]`; valid steps are the prefix `lengths[b]` of
    /// each segment. Outputs `[B·L × 2h]` (forward states then backward
    /// states), finals `[B × 2h]`.
    pub fn forward_batch(&self, x: &Tensor, batch: usize, lengths: &[usize]) -> Result<(Tensor, Tensor)> {
        let rows = x.shape()[0];
        if batch == 0 || rows % batch != 0 || lengths.len() != batch {
            return Err(Error::InvalidShape {
                op: "bigru",
                msg: format!("{rows} rows, batch {batch}, {} lengths", lengths.len()),
            });
        }
        let seg = rows / batch;
        if lengths.iter().any(|&l| l == 0 || l > seg) {
            return Err(Error::InvalidShape {
                op: "bigru",
                msg: format!("lengths {lengths:?} for segment {seg}"),
            });
        }
        let (fo, ff) = self.forward_dir.run(x, batch, lengths, false)?;
        let (bo, bf) = self.backward_dir.run(x, batch, lengths, true)?;
        Ok((Tensor::concat(&[fo, bo], 1)?, Tensor::concat(&[ff, bf], 1)?))
    }
}

impl Module for BiGruCell {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.forward_dir.collect_params(&join(prefix, "fwd"), out);
        self.backward_dir.collect_params(&join(prefix, "bwd"), out);
    }
}
