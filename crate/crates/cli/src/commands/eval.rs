use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use anyhow::{bail, Context, Result};
use paracnn::decode::parse_paragraphs;
use paracnn::metrics::{evaluate, EvalPair, Scores};
use serde_json::json;

use crate::commands::generate::Generated;
use crate::data::Manifest;

/// Reads hypotheses as JSON lines (`{"id", "paragraph"}`) when the first
/// non-blank line starts with `{`, otherwise as blank-line separated text
/// paragraphs in manifest order.
pub fn read_hypotheses(path: &Path) -> Result<Vec<(Option<String>, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().map(str::trim).find(|l| !l.is_empty());
    let Some(first) = first else {
        bail!("hypothesis file {} is empty", path.display());
    };
    if first.starts_with('{') {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let g: Generated = serde_json::from_str(l).with_context(|| format!("bad hypothesis line {l:?}"))?;
                Ok((Some(g.id), g.paragraph))
            })
            .collect()
    } else {
        Ok(parse_paragraphs(&text).into_iter().map(|p| (None, p)).collect())
    }
}

pub fn pair_up(hyps: &[(Option<String>, String)], manifest: &Manifest) -> Result<Vec<EvalPair>> {
    let refs = &manifest.records;
    if hyps.iter().all(|(id, _)| id.is_none()) {
        if hyps.len() != refs.len() {
            bail!("{} hypotheses for {} manifest entries", hyps.len(), refs.len());
        }
        return Ok(hyps
            .iter()
            .zip(refs)
            .map(|((_, h), r)| EvalPair::from_text(h, &[r.paragraph.as_str()]))
            .collect());
    }
    let by_id: HashMap<&str, &str> = refs.iter().map(|r| (r.id.as_str(), r.paragraph.as_str())).collect();
    let hyp_ids: BTreeSet<&str> = hyps.iter().filter_map(|(id, _)| id.as_deref()).collect();
    let ref_ids: BTreeSet<&str> = by_id.keys().copied().collect();
    let unknown: Vec<&str> = hyp_ids.difference(&ref_ids).copied().collect();
    let missing: Vec<&str> = ref_ids.difference(&hyp_ids).copied().collect();
    if !unknown.is_empty() || !missing.is_empty() || hyp_ids.len() != hyps.len() {
        bail!(
            "hypothesis ids do not match the manifest: not in manifest {:?}, without hypothesis {:?}{}",
            unknown,
            missing,
            if hyp_ids.len() != hyps.len() { ", duplicate or missing ids present" } else { "" }
        );
    }
    Ok(hyps
        .iter()
        .map(|(id, h)| EvalPair::from_text(h, &[by_id[id.as_deref().unwrap()]]))
        .collect())
}

pub fn eval_files(hypotheses: &Path, manifest: &Path) -> Result<Scores> {
    let hyps = read_hypotheses(hypotheses)?;
    let manifest = Manifest::read(manifest)?;
    let pairs = pair_up(&hyps, &manifest)?;
    Ok(evaluate(&pairs)?)
}

fn rows(s: &Scores) -> [(&'static str, f64); 6] {
    [
        ("BLEU-1", s.bleu[0]),
        ("BLEU-2", s.bleu[1]),
        ("BLEU-3", s.bleu[2]),
        ("BLEU-4", s.bleu[3]),
        ("ROUGE-L", s.rouge_l),
        ("CIDEr", s.cider),
    ]
}

/// Fixed-width table, scores ×100 with one decimal.
pub fn format_table(s: &Scores) -> String {
    let mut out = format!("{:<8} {:>7}\n", "metric", "score");
    for (name, v) in rows(s) {
        out.push_str(&format!("{:<8} {:>7.1}\n", name, 100.0 * v));
    }
    out
}

/// Raw (unscaled) scores keyed by metric.
pub fn scores_json(s: &Scores) -> serde_json::Value {
    json!({
        "bleu_1": s.bleu[0],
        "bleu_2": s.bleu[1],
        "bleu_3": s.bleu[2],
        "bleu_4": s.bleu[3],
        "rouge_l": s.rouge_l,
        "cider": s.cider,
    })
}
