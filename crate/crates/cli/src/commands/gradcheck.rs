use std::collections::BTreeMap;

use anyhow::Result;
use paracnn::corpus::{encode_sentences, EOS};
use paracnn::layers::{BiGruCell, CausalConvBlock, Embedding, Linear, Module, MultiHeadSelfAttention, VisualAttention};
use paracnn::model::{ImageBatch, ModelConfig, ParaCnn, Pooling};
use paracnn::rng::RngState;
use paracnn::tensor::{grad_check_steps, inject_backward_fault};
use paracnn::training::{
    adversarial_generator_loss, critic_loss, make_batch, twin_alignment, twin_l2_loss, Critic, Example,
    Packing,
};
use paracnn::Tensor;

pub const TOLERANCE: f64 = 1e-4;
/// Central-difference steps; each coordinate keeps its best agreement.
pub const STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentError {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub rows: Vec<ComponentError>,
    /// Parameter names of the model, for completeness checks.
    pub registry: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_error < TOLERANCE)
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(9).max(9);
        let mut out = format!("{:<width$} {:>7} {:>12}  status\n", "component", "coords", "max_rel_err");
        for r in &self.rows {
            let status = if r.max_rel_error < TOLERANCE { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{:<width$} {:>7} {:>12.3e}  {status}\n",
                r.name, r.coordinates, r.max_rel_error
            ));
        }
        out
    }
}

/// The fixed tiny configuration the check runs on.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        max_sentences: 2,
        max_words: 4,
        vocab_size: 11,
        feature_dim: 6,
        topic_kernel: 3,
        word_kernel: 3,
        topic_depth: 2,
        word_depth: 3,
        pooling: Pooling::SelfAttention,
        attention_heads: 2,
        attention_layers: vec![2],
        count_hidden: [8, 8],
        ..ModelConfig::default()
    }
    .with_width(8)
}

/// Component of a parameter: its name without the final segment.
pub fn component_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(c, _)| c)
}

fn random(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(), shape).expect("shape matches data")
}

fn random_leaf(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param((0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(), shape).expect("shape matches data")
}

fn tiny_data(cfg: &ModelConfig, rng: &mut RngState) -> Result<Vec<Example>> {
    let words = |rng: &mut RngState, len: usize| -> Vec<usize> {
        let mut s: Vec<usize> = (0..len).map(|_| 4 + rng.below(cfg.vocab_size - 4)).collect();
        s.push(EOS);
        s
    };
    let shapes: [(usize, &[usize]); 2] = [(3, &[3, 2]), (2, &[1])];
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(regions, lens))| {
            let sentences: Vec<Vec<usize>> = lens.iter().map(|&l| words(rng, l)).collect();
            Ok(Example {
                id: format!("g{i}"),
                features: random(rng, &[regions, cfg.feature_dim]),
                paragraph: encode_sentences(&sentences, cfg.max_sentences, cfg.max_words)?,
            })
        })
        .collect()
}

struct Checker {
    rows: Vec<ComponentError>,
}

impl Checker {
    /// Max error of `loss` over every coordinate of every tensor in `wrt`.
    fn check(&mut self, name: &str, wrt: &[Tensor], loss: &dyn Fn() -> paracnn::Result<Tensor>) -> Result<()> {
        let mut worst = 0.0f64;
        let mut coords = 0;
        for x in wrt {
            worst = worst.max(grad_check_steps(|_| loss(), x, &STEPS)?);
            coords += x.numel();
        }
        self.rows.push(ComponentError {
            name: name.to_string(),
            max_rel_error: worst,
            coordinates: coords,
        });
        Ok(())
    }

    fn check_module(&mut self, name: &str, m: &impl Module, inputs: &[Tensor], loss: &dyn Fn() -> paracnn::Result<Tensor>) -> Result<()> {
        let mut wrt: Vec<Tensor> = m.params().into_iter().map(|(_, t)| t).collect();
        wrt.extend(inputs.iter().cloned());
        self.check(name, &wrt, loss)
    }
}

fn weighted(out: &Tensor, w: &Tensor) -> paracnn::Result<Tensor> {
    Ok(out.mul(w)?.sum())
}

/// Finite-difference checks of every model component under the full
/// training objective, the twin losses, the critic and each layer type.
/// With `inject_fault`, a backward rule is deliberately corrupted.
pub fn gradcheck(seed: u64, inject_fault: bool) -> Result<GradcheckReport> {
    inject_backward_fault(inject_fault);
    let result = run(seed);
    inject_backward_fault(false);
    result
}

fn run(seed: u64) -> Result<GradcheckReport> {
    let cfg = tiny_config();
    let mut rng = RngState::new(seed);
    let model = ParaCnn::new(cfg.clone(), &mut rng)?;
    let data = tiny_data(&cfg, &mut rng)?;
    let refs: Vec<&Example> = data.iter().collect();
    let (batch, image) = make_batch(&refs)?;
    let mut ck = Checker { rows: Vec::new() };

    // Cross-entropy for the generator; the count predictor is trained on a
    // detached image vector, so it gets its own loss.
    let ce = || -> paracnn::Result<Tensor> { Ok(model.loss(&batch, &image)?.0) };
    let counts = || -> paracnn::Result<Tensor> {
        let global = model.project_features(&image)?.global.detach();
        model.counter.loss(&global, &batch.sentence_counts)
    };
    let params = model.params();
    let mut groups: BTreeMap<&str, Vec<Tensor>> = BTreeMap::new();
    for (name, t) in &params {
        groups.entry(component_of(name)).or_default().push(t.clone());
    }
    for (component, tensors) in &groups {
        if component.starts_with("counter") {
            ck.check(component, tensors, &counts)?;
        } else {
            ck.check(component, tensors, &ce)?;
        }
    }
    let model_worst = ck.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let model_coords: usize = ck.rows.iter().map(|r| r.coordinates).sum();

    // Cross-entropy with respect to the (zero-padded) image features too.
    let leaves: Vec<Tensor> = data
        .iter()
        .map(|e| Tensor::param(e.features.to_vec(), e.features.shape()).expect("same shape"))
        .collect();
    let padded = || -> paracnn::Result<Tensor> {
        let parts = leaves
            .iter()
            .map(|l| {
                let short = image.max_regions - l.shape()[0];
                if short == 0 {
                    Ok(l.clone())
                } else {
                    Tensor::concat(&[l.clone(), Tensor::zeros(&[short, cfg.feature_dim])], 0)
                }
            })
            .collect::<paracnn::Result<Vec<_>>>()?;
        let features = Tensor::concat(&parts, 0)?;
        let img = ImageBatch {
            features,
            ..image.clone()
        };
        Ok(model.loss(&batch, &img)?.0)
    };
    ck.check("loss.features", &leaves, &padded)?;
    let features_row = ck.rows.pop().expect("just pushed");
    ck.rows.push(ComponentError {
        name: "loss.full".into(),
        max_rel_error: model_worst.max(features_row.max_rel_error),
        coordinates: model_coords + features_row.coordinates,
    });
    ck.rows.push(features_row);

    // Twin losses on the decoder's hidden states.
    let out = model.forward(&batch, &image)?;
    let channels = out.hidden.shape()[1];
    let rows = out.hidden.shape()[0];
    let (fwd_seq, bwd_seq) = twin_alignment(&batch, false);
    let fwd_rows: Vec<usize> = fwd_seq.iter().flatten().copied().collect();
    let bwd_rows: Vec<usize> = bwd_seq.iter().flatten().copied().collect();
    let h_fwd = random_leaf(&mut rng, &[rows, channels]);
    let h_bwd = random(&mut rng, &[rows, channels]);
    ck.check("twin.l2", &[h_fwd.clone()], &|| twin_l2_loss(&h_fwd, &h_bwd, &fwd_rows, &bwd_rows))?;

    let critic = Critic::new(&mut rng, channels, 4);
    let pack_f = Packing::new(&fwd_seq);
    let pack_b = Packing::new(&bwd_seq);
    ck.check("twin.adversarial", &[h_fwd.clone()], &|| {
        adversarial_generator_loss(&critic, &pack_f.apply(&h_fwd)?, &pack_f)
    })?;
    let fake = pack_f.apply(&h_fwd.detach())?;
    let real = pack_b.apply(&h_bwd)?;
    let critic_params: Vec<Tensor> = critic.params().into_iter().map(|(_, t)| t).collect();
    ck.check("critic", &critic_params, &|| critic_loss(&critic, &fake, &real, &pack_f, &pack_b))?;

    // Each layer type on its own, inputs included.
    let x = random_leaf(&mut rng, &[6, 4]);
    let lin = Linear::new(&mut rng, 4, 3);
    let w = random(&mut rng, &[6, 3]);
    ck.check_module("layer.linear", &lin, &[x.clone()], &|| weighted(&lin.forward(&x)?, &w))?;

    let conv = CausalConvBlock::new(&mut rng, 3, 4, 4, true);
    let w = random(&mut rng, &[6, 4]);
    ck.check_module("layer.causal_conv", &conv, &[x.clone()], &|| weighted(&conv.forward(&x, 3)?, &w))?;

    let emb = Embedding::new(&mut rng, 7, 4);
    let w = random(&mut rng, &[5, 4]);
    ck.check_module("layer.embedding", &emb, &[], &|| weighted(&emb.forward(&[1, 4, 6, 4, 0])?, &w))?;

    let att = VisualAttention::new(&mut rng, 4, 5, 3);
    let regions = random_leaf(&mut rng, &[6, 5]);
    let mask = [true, true, false, true, true, true];
    let w = random(&mut rng, &[6, 5]);
    ck.check_module("layer.visual_attention", &att, &[x.clone(), regions.clone()], &|| {
        weighted(&att.forward(&x, &regions, 2, Some(&mask))?.0, &w)
    })?;

    let mhsa = MultiHeadSelfAttention::new(&mut rng, 4, 2)?;
    let key_mask = [true, true, false, true, true, true];
    let w = random(&mut rng, &[6, 4]);
    ck.check_module("layer.self_attention", &mhsa, &[x.clone()], &|| {
        weighted(&mhsa.forward(&x, 2, Some(&key_mask))?.0, &w)
    })?;

    let gru = BiGruCell::new(&mut rng, 4, 3);
    let w = random(&mut rng, &[6, 6]);
    ck.check_module("layer.bigru", &gru, &[x.clone()], &|| {
        weighted(&gru.forward_batch(&x, 2, &[3, 2])?.0, &w)
    })?;

    Ok(GradcheckReport {
        rows: ck.rows,
        registry: params.into_iter().map(|(n, _)| n).collect(),
    })
}
