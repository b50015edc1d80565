//! Corpus-level BLEU-1..4, ROUGE-L and CIDEr-D over flat token streams.
//!
//! Text is lowercased and split on whitespace with punctuation trimmed from
//! token edges before scoring. METEOR is not provided.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};

/// ROUGE-L recall weight, as `β²`.
pub const ROUGE_BETA_SQ: f64 = 1.2;
/// Gaussian length-penalty width of CIDEr-D.
pub const CIDER_SIGMA: f64 = 6.0;
const CIDER_MAX_N: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn from_text(hypothesis: &str, references: &[&str]) -> Self {
        Self {
            hypothesis: tokenize(hypothesis),
            references: references.iter().map(|r| tokenize(r)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
}

fn check(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(i) = pairs.iter().position(|p| p.references.is_empty()) {
        return Err(Error::Config(format!("pair {i} has no references")));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-`n`: clipped n-gram precisions for orders `1..=n`, geometric
/// mean, brevity penalty `exp(1 − r/c)` when the total hypothesis length `c`
/// is below the closest-reference length `r`.
pub fn bleu(pairs: &[EvalPair], n: usize) -> Result<f64> {
    check(pairs)?;
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} outside 1..=4")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c, mut r) = (0usize, 0usize);
    for p in pairs {
        if p.hypothesis.is_empty() {
            log::warn!("empty hypothesis scores zero");
        }
        let hl = p.hypothesis.len();
        c += hl;
        r += p
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(hl), l))
            .unwrap_or(0);
        for k in 1..=n {
            let refs: Vec<_> = p.references.iter().map(|r| ngram_counts(r, k)).collect();
            for (g, cnt) in ngram_counts(&p.hypothesis, k) {
                let max_ref = refs.iter().map(|m| m.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[k - 1] += cnt.min(max_ref);
            }
            total[k - 1] += hl.saturating_sub(k - 1);
        }
    }
    if c == 0 || matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure per pair (precision and recall each maximised over the
/// references), averaged over the corpus.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    check(pairs)?;
    let total: f64 = pairs
        .iter()
        .map(|p| {
            let (mut best_p, mut best_r) = (0.0f64, 0.0f64);
            for r in &p.references {
                let l = lcs(&p.hypothesis, r) as f64;
                if !p.hypothesis.is_empty() {
                    best_p = best_p.max(l / p.hypothesis.len() as f64);
                }
                if !r.is_empty() {
                    best_r = best_r.max(l / r.len() as f64);
                }
            }
            if best_p == 0.0 || best_r == 0.0 {
                0.0
            } else {
                (1.0 + ROUGE_BETA_SQ) * best_p * best_r / (best_r + ROUGE_BETA_SQ * best_p)
            }
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

struct TfIdf<'a> {
    vecs: Vec<HashMap<&'a [String], f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &[HashMap<&'a [String], usize>], log_n: f64) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(CIDER_MAX_N);
    let mut norms = Vec::with_capacity(CIDER_MAX_N);
    for n in 1..=CIDER_MAX_N {
        let v: HashMap<&[String], f64> = ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let d = df[n - 1].get(g).copied().unwrap_or(0).max(1) as f64;
                (g, tf as f64 * (log_n - d.ln()))
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        len: tokens.len(),
    }
}

/// CIDEr-D with document frequencies taken over the references of `pairs`:
/// clipped tf-idf cosine per n-gram order 1..4, Gaussian length penalty,
/// mean over orders and references, scaled by 10, averaged over the corpus.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    check(pairs)?;
    if pairs.len() == 1 {
        log::warn!("CIDEr over a single document: document frequencies are degenerate");
    }
    let mut df: Vec<HashMap<&[String], usize>> = vec![HashMap::new(); CIDER_MAX_N];
    for p in pairs {
        for n in 1..=CIDER_MAX_N {
            let mut seen = std::collections::HashSet::new();
            for r in &p.references {
                seen.extend(ngram_counts(r, n).into_keys());
            }
            for g in seen {
                *df[n - 1].entry(g).or_insert(0) += 1;
            }
        }
    }
    let log_n = (pairs.len() as f64).ln();
    let mut total = 0.0;
    for p in pairs {
        let h = tfidf(&p.hypothesis, &df, log_n);
        let mut score = [0.0; CIDER_MAX_N];
        for r in &p.references {
            let rv = tfidf(r, &df, log_n);
            let delta = h.len as f64 - rv.len as f64;
            let damp = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..CIDER_MAX_N {
                let mut val: f64 = h.vecs[n]
                    .iter()
                    .filter_map(|(g, &hv)| rv.vecs[n].get(g).map(|&x| hv.min(x) * x))
                    .sum();
                if h.norms[n] != 0.0 && rv.norms[n] != 0.0 {
                    val /= h.norms[n] * rv.norms[n];
                }
                score[n] += val * damp;
            }
        }
        let mean = score.iter().sum::<f64>() / CIDER_MAX_N as f64;
        total += mean / p.references.len() as f64 * 10.0;
    }
    Ok(total / pairs.len() as f64)
}

pub fn evaluate(pairs: &[EvalPair]) -> Result<Scores> {
    Ok(Scores {
        bleu: [bleu(pairs, 1)?, bleu(pairs, 2)?, bleu(pairs, 3)?, bleu(pairs, 4)?],
        rouge_l: rouge_l(pairs)?,
        cider: cider(pairs)?,
    })
}
