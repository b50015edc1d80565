//! End-to-end acceptance checks. Each test writes one `[PASS]`/`[FAIL]`
//! line straight to stderr, so it shows even when output is captured.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use paracnn::checkpoint::Checkpoint;
use paracnn::corpus::{
    encode_paragraph, encode_sentences, write_features, EncodedParagraph, ParagraphBatch, SyntheticConfig, Vocab, EOS,
    START,
};
use paracnn::decode::{greedy_decode, DecodeConfig, SentenceCount};
use paracnn::layers::CausalConvBlock;
use paracnn::metrics::{bleu, cider, evaluate, rouge_l, EvalPair, ROUGE_BETA_SQ};
use paracnn::model::{ImageBatch, ModelConfig, ParaCnn, Pooling, TopicState};
use paracnn::rng::RngState;
use paracnn::training::{critic_step, Critic, Packing, RmsProp, TrainConfig, Trainer, TwinConfig, TwinMode};
use paracnn::Tensor;
use paracnn_cli::commands::gradcheck::{tiny_config, TOLERANCE};
use paracnn_cli::commands::train::{checkpoint_path, CHECKPOINT_DIR, METRICS_LOG};
use paracnn_cli::data::Manifest;
use paracnn_cli::{format_table, generate, gradcheck, train, GenerateOptions, RunConfig};

fn report(n: usize, what: &str, ok: bool, detail: String) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {n}: {what}: {detail}");
}

fn features(rng: &mut RngState, r: usize, d: usize) -> Tensor {
    Tensor::new((0..r * d).map(|_| rng.uniform(-1.0, 1.0)).collect(), &[r, d]).unwrap()
}

/// Features for a scene with one to four regions.
fn scene(rng: &mut RngState, d: usize) -> Tensor {
    let r = 1 + rng.below(4);
    features(rng, r, d)
}

fn word(rng: &mut RngState, v: usize) -> usize {
    4 + rng.below(v - 4)
}

fn paragraph(rng: &mut RngState, cfg: &ModelConfig, count: usize) -> EncodedParagraph {
    let sentences: Vec<Vec<usize>> = (0..count)
        .map(|_| {
            let len = 1 + rng.below(cfg.max_words - 1);
            let mut s: Vec<usize> = (0..len).map(|_| word(rng, cfg.vocab_size)).collect();
            s.push(EOS);
            s
        })
        .collect();
    encode_sentences(&sentences, cfg.max_sentences, cfg.max_words).unwrap()
}

fn some_paragraph(rng: &mut RngState, cfg: &ModelConfig) -> EncodedParagraph {
    let count = 1 + rng.below(cfg.max_sentences);
    paragraph(rng, cfg, count)
}

fn causal_config(rng: &mut RngState) -> ModelConfig {
    ModelConfig {
        max_sentences: 2 + rng.below(3),
        max_words: 3 + rng.below(4),
        pooling: if rng.below(2) == 0 { Pooling::Mean } else { Pooling::SelfAttention },
        residual: rng.below(2) == 0,
        ..tiny_config()
    }
}

/// The toy configuration: 500 training scenes, M=3, N=8, width 64.
fn toy_run(data: &Path, out: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::parse("", &[]).unwrap();
    cfg.seed = 1;
    cfg.data_dir = data.to_path_buf();
    cfg.out_dir = out.to_path_buf();
    cfg.min_freq = 2;
    cfg.model.max_sentences = 3;
    cfg.model.max_words = 8;
    cfg.model = cfg.model.with_width(64);
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 25;
    cfg.train.learning_rate = 1e-3;
    cfg
}

fn toy_corpus(dir: &Path) -> std::path::PathBuf {
    corpus(
        dir,
        3,
        625,
        SyntheticConfig {
            max_objects: 3,
            noise: 0.0,
            ..SyntheticConfig::default()
        },
    )
}

#[test]
fn criterion_01_gradient_oracle() {
    let _g = heavy();
    let start = Instant::now();
    let out = Command::new(bin()).args(["gradcheck", "--seed", "0"]).output().unwrap();
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let report_rows = gradcheck(0, false).unwrap();
    let worst = report_rows.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let mut covered: Vec<&str> = report_rows.rows.iter().map(|r| r.name.as_str()).collect();
    covered.sort();
    let missing: Vec<&String> = report_rows
        .registry
        .iter()
        .filter(|p| !covered.iter().any(|c| p.starts_with(&format!("{c}.")) || p.as_str() == *c))
        .collect();
    let has_loss = covered.contains(&"loss.full");
    let ok = out.status.success()
        && !text.contains("FAIL")
        && worst < TOLERANCE
        && missing.is_empty()
        && has_loss
        && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient oracle",
        ok,
        format!(
            "{} rows, worst rel err {worst:.2e}, uncovered params {}, {:.1}s",
            report_rows.rows.len(),
            missing.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok, "{text}\nmissing: {missing:?}");
}

/// One trial of each kind: conv stack, single sentence, full paragraph.
fn causality_trial(rng: &mut RngState) -> usize {
    let mut violations = 0;
    let cfg = causal_config(rng);
    let model = ParaCnn::new(cfg.clone(), &mut RngState::new(rng.below(1 << 30) as u64)).unwrap();
    let (v, n, m) = (cfg.vocab_size, cfg.max_words, cfg.max_sentences);

    // word-level, raw conv stack over several segments
    let segs = 1 + rng.below(3);
    let len = 2 + rng.below(6);
    let width = cfg.channels;
    let stack: Vec<CausalConvBlock> = (0..1 + rng.below(3))
        .map(|_| {
            let kernel = 1 + rng.below(4);
            CausalConvBlock::new(rng, kernel, width, width, true)
        })
        .collect();
    let run = |x: &Tensor| {
        let mut h = x.clone();
        for l in &stack {
            h = l.forward(&h, len).unwrap();
        }
        h.to_vec()
    };
    let x = features(rng, segs * len, width);
    let base = run(&x);
    let (s, t) = (rng.below(segs), rng.below(len));
    let mut data = x.to_vec();
    for c in 0..width {
        data[(s * len + t) * width + c] += rng.uniform(0.5, 2.0);
    }
    let out = run(&Tensor::new(data, &[segs * len, width]).unwrap());
    for seg in 0..segs {
        let upto = if seg == s { t } else { len };
        let range = seg * len * width..(seg * len + upto) * width;
        if out[range.clone()] != base[range] {
            violations += 1;
        }
    }

    // word-level, through the sentence decoder
    let f = scene(rng, cfg.feature_dim);
    let image = model.project_features(&ImageBatch::from_features(&[&f]).unwrap()).unwrap();
    let topic = features(rng, 1, cfg.topic_dim);
    let mut prefix = vec![START];
    prefix.extend((1..n).map(|_| word(rng, v)));
    let base = model.sentence_forward(&topic, &prefix, &image).unwrap().0.to_vec();
    let t = 1 + rng.below(n - 1);
    let mut p = prefix.clone();
    p[t] = 4 + (p[t] - 4 + 1 + rng.below(v - 5)) % (v - 4);
    let out = model.sentence_forward(&topic, &p, &image).unwrap().0.to_vec();
    if out[..t * v] != base[..t * v] {
        violations += 1;
    }

    // sentence-level, teacher-forced paragraph pass
    let feats = [scene(rng, cfg.feature_dim), scene(rng, cfg.feature_dim)];
    let paras = [paragraph(rng, &cfg, m), some_paragraph(rng, &cfg)];
    let image = ImageBatch::from_features(&[&feats[0], &feats[1]]).unwrap();
    let forward = |a: &EncodedParagraph| {
        let batch = ParagraphBatch::from_paragraphs(&[a, &paras[1]]).unwrap();
        let o = model.forward(&batch, &image).unwrap();
        (o.topics.to_vec(), o.logits.to_vec())
    };
    let (topics, logits) = forward(&paras[0]);
    let j = rng.below(m);
    let valid = paras[0].sentences()[j].len();
    let q = rng.below(valid);
    let mut perturbed = paras[0].clone();
    let slot = j * n + q;
    perturbed.tokens[slot] = if perturbed.tokens[slot] == EOS { word(rng, v) } else { EOS };
    let (topics2, logits2) = forward(&perturbed);
    let td = cfg.topic_dim;
    // this item's topics up to and including j, and the other item entirely
    if topics2[..(j + 1) * td] != topics[..(j + 1) * td] || topics2[m * td..] != topics[m * td..] {
        violations += 1;
    }
    let upto = (j * n + q + 1) * v;
    if logits2[..upto] != logits[..upto] || logits2[m * n * v..] != logits[m * n * v..] {
        violations += 1;
    }
    violations
}

#[test]
fn criterion_02_causality() {
    let _g = heavy();
    let start = Instant::now();
    let mut rng = RngState::new(2024);
    let trials = 1000;
    let violations: usize = (0..trials).map(|_| causality_trial(&mut rng)).sum();
    let elapsed = start.elapsed();
    let ok = violations == 0 && elapsed < Duration::from_secs(120);
    report(
        2,
        "causality",
        ok,
        format!("{trials} trials, {violations} violations, {:.1}s", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn criterion_03_incremental_equivalence() {
    let _g = heavy();
    let mut rng = RngState::new(303);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let cfg = causal_config(&mut rng);
        let model = ParaCnn::new(cfg.clone(), &mut RngState::new(rng.below(1 << 30) as u64)).unwrap();
        let (v, n, m) = (cfg.vocab_size, cfg.max_words, cfg.max_sentences);
        let feats = [scene(&mut rng, cfg.feature_dim), scene(&mut rng, cfg.feature_dim)];
        let paras = [some_paragraph(&mut rng, &cfg), some_paragraph(&mut rng, &cfg)];
        let batch = ParagraphBatch::from_paragraphs(&[&paras[0], &paras[1]]).unwrap();
        let logits = model
            .forward(&batch, &ImageBatch::from_features(&[&feats[0], &feats[1]]).unwrap())
            .unwrap()
            .logits
            .to_vec();
        for b in 0..2 {
            let image = model.project_features(&ImageBatch::from_features(&[&feats[b]]).unwrap()).unwrap();
            let sentences = paras[b].sentences();
            let mut state = TopicState::new(1, m);
            for (j, sentence) in sentences.iter().enumerate() {
                let previous = j.checked_sub(1).map(|p| sentences[p].as_slice());
                let ctx = model.pool_context(previous).unwrap();
                let topic = model.topic_forward(&mut state, &image.global, &ctx).unwrap();
                let mut prefix = vec![START];
                for (t, &tok) in sentence.iter().enumerate() {
                    let step = model.sentence_forward(&topic, &prefix, &image).unwrap().0.to_vec();
                    let row = ((b * m + j) * n + t) * v;
                    for k in 0..v {
                        worst = worst.max((step[t * v + k] - logits[row + k]).abs());
                    }
                    prefix.push(tok);
                }
            }
        }
    }
    let ok = worst <= 1e-10;
    report(3, "incremental equivalence", ok, format!("100 instances, max |diff| {worst:.2e}"));
    assert!(ok);
}

/// Greedy exact-sentence matches on the held-out splits, decoding each
/// scene with its true sentence count and no penalty.
fn held_out_match(data: &Path, ckpt: &Path) -> (usize, usize) {
    let c = Checkpoint::load(ckpt).unwrap();
    let model = c.forward_model().unwrap();
    let vocab = c.vocab();
    let (m, n) = (c.meta.model.max_sentences, c.meta.model.max_words);
    let (mut hit, mut total) = (0, 0);
    for split in ["val", "test"] {
        let manifest = Manifest::read(&data.join(format!("{split}.jsonl"))).unwrap();
        for r in &manifest.records {
            let f = manifest.features(r, c.meta.model.feature_dim).unwrap();
            let truth = encode_paragraph(&r.paragraph, &vocab, m, n).unwrap();
            let dc = DecodeConfig::greedy(SentenceCount::Fixed(truth.sentence_count), n);
            let out = greedy_decode(&model, &f, &dc).unwrap();
            for (a, b) in out.iter().zip(truth.sentences()) {
                total += 1;
                hit += usize::from(*a == b);
            }
        }
    }
    (hit, total)
}

/// The metrics log and every checkpoint; the echoed config names its own
/// run directory and timings are wall-clock.
fn run_artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    tree(root)
        .into_iter()
        .filter(|(p, _)| p == METRICS_LOG || p.starts_with(CHECKPOINT_DIR))
        .collect()
}

#[test]
fn criterion_04_and_11_toy_learning_and_reproducibility() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    let data = toy_corpus(dir.path());
    let cfg = toy_run(&data, &dir.path().join("a"), 200);

    let start = Instant::now();
    let out = train(&cfg, false).unwrap();
    let elapsed = start.elapsed();
    let vocab_size = Checkpoint::load(&checkpoint_path(&out.out_dir, "last")).unwrap().vocab().len();
    let (hit, total) = held_out_match(&data, &checkpoint_path(&out.out_dir, "last"));
    let rate = hit as f64 / total as f64;
    let ok4 = rate >= 0.9 && vocab_size <= 60 && elapsed < Duration::from_secs(15 * 60);
    report(
        4,
        "toy learning",
        ok4,
        format!(
            "exact sentence match {hit}/{total} = {:.1}%, vocab {vocab_size}, train CE {:.4}, {:.0}s",
            100.0 * rate,
            out.last().ce_fwd,
            elapsed.as_secs_f64()
        ),
    );

    let mut again = cfg.clone();
    again.out_dir = dir.path().join("b");
    train(&again, false).unwrap();
    let (a, b) = (run_artifacts(&cfg.out_dir), run_artifacts(&again.out_dir));
    let files = a.len();
    let differing: Vec<&String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| &x.0)
        .collect();
    let ok11 = a.len() == b.len() && differing.is_empty() && a.iter().any(|(p, _)| p == METRICS_LOG);
    report(
        11,
        "reproducibility",
        ok11,
        format!("{files} files compared, {} differ", differing.len()),
    );
    assert!(ok4 && ok11, "differing: {differing:?}");
}

#[test]
fn criterion_05_twin_non_degradation() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    let data = toy_corpus(dir.path());
    let base_cfg = toy_run(&data, &dir.path().join("none"), 30);
    let mut twin_cfg = with_mode(toy_run(&data, &dir.path().join("twin"), 30), TwinMode::L2PlusAdversarial);
    twin_cfg.twin.critic_hidden = 32;
    let base = train(&base_cfg, false).unwrap();
    let twin = train(&twin_cfg, false).unwrap();
    let base_ce = base.last().val_ce.unwrap();
    let twin_ce = twin.last().val_ce.unwrap();
    let l2_first = twin.records[1].twin_l2.unwrap();
    let l2_last = twin.last().twin_l2.unwrap();
    let ok = twin_ce <= base_ce + 0.05 && l2_last < 0.5 * l2_first && twin.last().epoch == 30;
    report(
        5,
        "twin non-degradation",
        ok,
        format!("val CE twin {twin_ce:.4} vs none {base_ce:.4}; twin_l2 {l2_first:.4} -> {l2_last:.4}"),
    );
    assert!(ok);
}

#[test]
fn criterion_06_twin_off_equivalence() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 8, 30, small_synthetic());
    let mut none = tiny_run(&data, &dir.path().join("none"));
    none.train.epochs = 4;
    let mut l2 = with_mode(none.clone(), TwinMode::L2);
    l2.out_dir = dir.path().join("l2");
    l2.twin.lambda_l2 = 0.0;
    let a = train(&none, false).unwrap();
    let b = train(&l2, false).unwrap();
    let trajectory = |o: &paracnn_cli::TrainOutcome| -> Vec<(u64, Option<u64>, bool)> {
        o.records
            .iter()
            .map(|r| (r.ce_fwd.to_bits(), r.val_ce.map(f64::to_bits), r.best))
            .collect()
    };
    let same_log = trajectory(&a) == trajectory(&b);
    let mut same_params = true;
    for name in ["epoch-0001", "epoch-0002", "epoch-0003", "epoch-0004", "last", "best"] {
        let x = Checkpoint::load(&checkpoint_path(&a.out_dir, name)).unwrap().forward_only();
        let y = Checkpoint::load(&checkpoint_path(&b.out_dir, name)).unwrap().forward_only();
        same_params &= x.entries == y.entries && x.meta.epoch == y.meta.epoch && x.meta.val_ce == y.meta.val_ce;
    }
    let twin_ran = b.records[1..].iter().all(|r| r.twin_l2.is_some());
    let ok = same_log && same_params && twin_ran;
    report(
        6,
        "twin-off equivalence",
        ok,
        format!("forward log identical {same_log}, forward parameters identical {same_params}"),
    );
    assert!(ok);
}

#[test]
fn criterion_07_wgan_mechanics() {
    let _g = heavy();
    let clip = 0.01;
    let mut rng = RngState::new(77);
    let d = 6;
    let critic = Critic::new(&mut rng, d, 5);
    let mut opt = RmsProp::new(0.05);
    let mut worst = 0.0f64;
    let mut bound_hit = false;
    for _ in 0..200 {
        let lens: Vec<usize> = (0..3).map(|_| 1 + rng.below(5)).collect();
        let total: usize = lens.iter().sum();
        let mut start = 0;
        let seqs: Vec<Vec<usize>> = lens
            .iter()
            .map(|&l| {
                let s = (start..start + l).collect();
                start += l;
                s
            })
            .collect();
        let packing = Packing::new(&seqs);
        let fake = packing.apply(&features(&mut rng, total, d)).unwrap();
        let real = packing.apply(&features(&mut rng, total, d).add_scalar(0.5)).unwrap();
        critic_step(&critic, &fake, &real, &packing, &packing, &mut opt, clip).unwrap();
        let w = critic.max_abs_weight();
        worst = worst.max(w);
        bound_hit |= w == clip;
    }

    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 4, 20, small_synthetic());
    let cfg = with_mode(tiny_run(&data, &dir.path().join("run")), TwinMode::L2PlusAdversarial);
    let out = train(&cfg, false).unwrap();
    let logged = &out.records[1..];
    let schedule = logged
        .iter()
        .all(|r| r.generator_updates > 0 && r.critic_updates == cfg.twin.critic_steps * r.generator_updates);
    let logged_max = logged.iter().map(|r| r.max_critic_weight.unwrap()).fold(0.0, f64::max);
    let ok = worst <= clip && bound_hit && schedule && cfg.twin.critic_steps == 5 && logged_max <= cfg.twin.clip;
    let counts: Vec<String> = logged
        .iter()
        .map(|r| format!("{}:{}", r.critic_updates, r.generator_updates))
        .collect();
    report(
        7,
        "W-GAN mechanics",
        ok,
        format!(
            "200 direct steps max |w| {worst} (c = {clip}); logged critic:generator {} max |w| {logged_max}",
            counts.join(" ")
        ),
    );
    assert!(ok);
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

/// Corpus BLEU by direct counting over lists.
fn bleu_oracle(pairs: &[EvalPair], order: usize) -> f64 {
    let (mut c, mut r) = (0usize, 0usize);
    let mut log_sum = 0.0;
    for n in 1..=order {
        let (mut hit, mut all) = (0usize, 0usize);
        for p in pairs {
            let hg = grams(&p.hypothesis, n);
            let mut distinct = hg.clone();
            distinct.sort();
            distinct.dedup();
            for g in &distinct {
                let here = hg.iter().filter(|x| *x == g).count();
                let cap = p
                    .references
                    .iter()
                    .map(|rf| grams(rf, n).iter().filter(|x| *x == g).count())
                    .max()
                    .unwrap();
                hit += here.min(cap);
            }
            all += hg.len();
        }
        if hit == 0 {
            return 0.0;
        }
        log_sum += (hit as f64 / all as f64).ln();
    }
    for p in pairs {
        let h = p.hypothesis.len();
        c += h;
        let mut lens: Vec<usize> = p.references.iter().map(Vec::len).collect();
        lens.sort_by_key(|&l| (l.abs_diff(h), l));
        r += lens[0];
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_sum / order as f64).exp()
}

/// LCS by enumerating every subsequence of the shorter side.
fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<&String> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
        let mut it = long.iter();
        if sub.iter().all(|w| it.any(|x| x == *w)) {
            best = best.max(sub.len());
        }
    }
    best
}

fn rouge_oracle(pairs: &[EvalPair]) -> f64 {
    let mut total = 0.0;
    for p in pairs {
        let prec = p.references.iter().map(|r| lcs_brute(&p.hypothesis, r) as f64 / p.hypothesis.len() as f64).fold(0.0, f64::max);
        let rec = p.references.iter().map(|r| lcs_brute(&p.hypothesis, r) as f64 / r.len() as f64).fold(0.0, f64::max);
        if prec > 0.0 && rec > 0.0 {
            total += (1.0 + ROUGE_BETA_SQ) * prec * rec / (rec + ROUGE_BETA_SQ * prec);
        }
    }
    total / pairs.len() as f64
}

/// CIDEr-D over single-reference pairs, spelled out per n-gram order.
fn cider_oracle(pairs: &[EvalPair]) -> f64 {
    let docs = pairs.len() as f64;
    let mut total = 0.0;
    for p in pairs {
        let (h, rf) = (&p.hypothesis, &p.references[0]);
        let mut sum = 0.0;
        for n in 1..=4 {
            let idf = |g: &Vec<String>| {
                let df = pairs.iter().filter(|q| grams(&q.references[0], n).contains(g)).count().max(1) as f64;
                docs.ln() - df.ln()
            };
            let weights = |t: &[String]| -> Vec<(Vec<String>, f64)> {
                let all = grams(t, n);
                let mut uniq = all.clone();
                uniq.sort();
                uniq.dedup();
                uniq.into_iter()
                    .map(|g| {
                        let tf = all.iter().filter(|x| **x == g).count() as f64;
                        let w = tf * idf(&g);
                        (g, w)
                    })
                    .collect()
            };
            let (hw, rw) = (weights(h), weights(rf));
            let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
            let mut dot = 0.0;
            for (g, a) in &hw {
                for (q, b) in &rw {
                    if g == q {
                        dot += a.min(*b) * b;
                    }
                }
            }
            if norm(&hw) > 0.0 && norm(&rw) > 0.0 {
                dot /= norm(&hw) * norm(&rw);
            }
            let delta = h.len() as f64 - rf.len() as f64;
            sum += dot * (-delta * delta / (2.0 * 36.0)).exp();
        }
        total += sum / 4.0 * 10.0;
    }
    total / pairs.len() as f64
}

#[test]
fn criterion_08_metric_oracles() {
    let fixtures: Vec<Vec<EvalPair>> = vec![
        vec![EvalPair::from_text("the the the the", &["the cat"])],
        vec![EvalPair::from_text("the cat", &["the cat sat down"])],
        vec![
            EvalPair::from_text("a red cube is in the south", &["a red cube is in the north"]),
            EvalPair::from_text("a blue ball is here", &["a blue ball is in the south"]),
            EvalPair::from_text("the green cone", &["the green cone is here"]),
        ],
        vec![
            EvalPair::from_text("a cat sat on the mat", &["the cat sat on the mat", "a cat is on a mat"]),
            EvalPair::from_text("there is a dog in the park", &["a dog runs in the park", "there is a dog"]),
        ],
    ];
    let mut worst = 0.0f64;
    for pairs in &fixtures {
        for n in 1..=4 {
            worst = worst.max((bleu(pairs, n).unwrap() - bleu_oracle(pairs, n)).abs());
        }
        worst = worst.max((rouge_l(pairs).unwrap() - rouge_oracle(pairs)).abs());
        if pairs.iter().all(|p| p.references.len() == 1) && pairs.len() > 1 {
            worst = worst.max((cider(pairs).unwrap() - cider_oracle(pairs)).abs());
        }
    }
    let clipping = bleu(&fixtures[0], 1).unwrap();
    let cider_three = cider(&fixtures[2]).unwrap();

    let same = [EvalPair::from_text("the red cube is in the north.", &["the red cube is in the north."])];
    let s = evaluate(&same).unwrap();
    let table = format_table(&s);
    let exact = s.bleu[0] == 1.0 && s.rouge_l == 1.0;
    let shown = table.lines().any(|l| l.starts_with("BLEU-1") && l.trim_end().ends_with("100.0"))
        && table.lines().any(|l| l.starts_with("ROUGE-L") && l.trim_end().ends_with("100.0"));

    let ok = worst < 1e-10 && (clipping - 0.25).abs() < 1e-10 && cider_three > 0.0 && exact && shown;
    report(
        8,
        "metric oracles",
        ok,
        format!("max |metric - oracle| {worst:.1e}, clipping case {clipping}, 3-doc CIDEr {cider_three:.6}, identical pair {}", if exact { "1.0" } else { "not 1.0" }),
    );
    assert!(ok, "{table}");
}

/// A checkpoint whose output ignores the input and ranks the words
/// `w0 > w1 > … > w7`, with `<eos>` never competitive.
fn looping_checkpoint(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut tokens: Vec<String> = ["<pad>", "<start>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
    tokens.extend((0..8).map(|i| format!("w{i}")));
    let vocab = Vocab::from_tokens(tokens, 1);
    let cfg = ModelConfig {
        max_sentences: 3,
        max_words: 12,
        vocab_size: vocab.len(),
        feature_dim: 4,
        topic_depth: 1,
        word_depth: 2,
        attention_layers: vec![1],
        attention_heads: 2,
        count_hidden: [4, 4],
        ..ModelConfig::default()
    }
    .with_width(8);
    let trainer = Trainer::new(cfg, TrainConfig::default(), TwinConfig::default(), 9).unwrap();
    let out = trainer.forward.output_layer();
    out.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
    let bias = out.bias.as_ref().unwrap();
    for (t, b) in bias.data_mut().iter_mut().enumerate() {
        *b = if t < 4 { -100.0 } else { 1.0 - 0.01 * (t - 4) as f64 };
    }
    let ckpt = dir.join("loop.ckpt");
    Checkpoint::from_trainer(&trainer, &vocab, None).save(&ckpt).unwrap();
    let feats = dir.join("scene.pfv");
    write_features(&feats, 2, 4, &[0.3, -0.1, 0.8, 0.2, -0.5, 0.4, 0.0, 0.9]).unwrap();
    (ckpt, feats)
}

#[test]
fn criterion_09_repetition_penalty() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, feats) = looping_checkpoint(dir.path());
    let run = |gamma: f64, block: bool| {
        let opts = GenerateOptions {
            checkpoint: ckpt.clone(),
            features: vec![feats.clone()],
            rep_penalty: Some(gamma),
            block_trigrams: Some(block),
            ..Default::default()
        };
        generate(&opts).unwrap().remove(0).paragraph
    };
    let plain = repeated_trigrams(&run(0.0, false));
    let blocked: Vec<usize> = [0.0, 1.0, 2.0, 4.0].iter().map(|&g| repeated_trigrams(&run(g, true))).collect();
    let by_gamma: Vec<usize> = [0.0, 1.0, 2.0, 4.0].iter().map(|&g| repeated_trigrams(&run(g, false))).collect();
    let monotone = by_gamma.windows(2).all(|w| w[1] <= w[0]);
    let ok = plain > 0 && blocked.iter().all(|&r| r == 0) && monotone;
    report(
        9,
        "repetition penalty",
        ok,
        format!("repeated trigrams unblocked {plain}, blocked {blocked:?}, over gamma 0/1/2/4 {by_gamma:?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_10_length_flexibility() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 10, 30, SyntheticConfig::default());
    let mut cfg = tiny_run(&data, &dir.path().join("run"));
    cfg.model.max_sentences = 6;
    train(&cfg, false).unwrap();
    let ckpt = checkpoint_path(&cfg.out_dir, "last");
    let opts = |sentences: Option<usize>, adaptive: Option<(usize, usize)>| GenerateOptions {
        checkpoint: ckpt.clone(),
        manifest: Some(data.join("test.jsonl")),
        sentences,
        adaptive,
        ..Default::default()
    };
    let lines = |items: &[paracnn_cli::Generated]| -> Vec<usize> { items.iter().map(|g| g.paragraph.lines().count()).collect() };
    let mut fixed_ok = true;
    let mut clamp_ok = true;
    for k in [5, 6, 7] {
        let fixed = generate(&opts(Some(k), None)).unwrap();
        fixed_ok &= !fixed.is_empty() && lines(&fixed).iter().all(|&c| c == k);
        clamp_ok &= generate(&opts(None, Some((k, k)))).unwrap() == fixed;
    }
    let adaptive = lines(&generate(&opts(None, Some((5, 7)))).unwrap());
    let within = adaptive.iter().all(|c| (5..=7).contains(c));
    let ok = fixed_ok && clamp_ok && within;
    report(
        10,
        "length flexibility",
        ok,
        format!("fixed 5/6/7 {fixed_ok}, adaptive [5, 7] counts {adaptive:?}, [k, k] equals fixed k {clamp_ok}"),
    );
    assert!(ok);
}

#[test]
fn acceptance_corpus_matches_toy_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_corpus(dir.path());
    let count = |s: &str| fs::read_to_string(data.join(format!("{s}.jsonl"))).unwrap().lines().count();
    assert_eq!((count("train"), count("val"), count("test")), (500, 62, 63));
}
