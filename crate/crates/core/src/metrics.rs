//! Evaluation quantities: exact-match accuracy, ANLS, token counts, ActRatio,
//! attribute retention (VARR) and POPE-style yes/no statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VskipError};
use crate::trace::Mask;

/// ANLS threshold: normalized distances at or above this score zero.
pub const ANLS_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PopeStats {
    pub yes_ratio: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// Exact-match accuracy in [0, 1].
    pub accuracy: f64,
    /// Mean ANLS as a percentage in [0, 100].
    pub anls: f64,
    pub avg_tokens: f64,
    pub act_ratio: f64,
    /// Attribute category to retention percentage.
    pub varr: BTreeMap<String, f64>,
    pub pope: PopeStats,
    pub wall_clock_s: f64,
}

/// Trim and case-fold.
pub fn canonicalize(s: &str) -> String {
    s.trim().to_lowercase()
}

pub fn top1_accuracy(preds: &[String], golds: &[String]) -> Result<f64> {
    check_pairs(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| canonicalize(p) == canonicalize(g)).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn check_pairs(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(VskipError::domain(format!("{a} predictions for {b} references")));
    }
    if a == 0 {
        return Err(VskipError::domain("no samples to evaluate"));
    }
    Ok(())
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(p: &str, g: &str) -> usize {
    let a: Vec<char> = p.chars().collect();
    let b: Vec<char> = g.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized Levenshtein similarity with threshold `tau`. Two empty strings
/// are identical and score 1.
pub fn anls_pair(p: &str, g: &str, tau: f64) -> f64 {
    let m = p.chars().count().max(g.chars().count());
    if m == 0 {
        return 1.0;
    }
    let d = levenshtein(p, g) as f64;
    let m = m as f64;
    if d < tau * m {
        1.0 - d / m
    } else {
        0.0
    }
}

/// Mean ANLS over samples, scaled to 0..100.
pub fn anls(preds: &[String], golds: &[String], tau: f64) -> Result<f64> {
    check_pairs(preds.len(), golds.len())?;
    let total: f64 = preds.iter().zip(golds).map(|(p, g)| anls_pair(p, g, tau)).sum();
    Ok(100.0 * total / preds.len() as f64)
}

/// Length-weighted retained fraction over a corpus.
pub fn act_ratio(compressed: &[usize], original: &[usize]) -> Result<f64> {
    if compressed.len() != original.len() {
        return Err(VskipError::domain("compressed and original length lists differ"));
    }
    let total: usize = original.iter().sum();
    if total == 0 {
        return Err(VskipError::domain("total original length is zero"));
    }
    Ok(compressed.iter().sum::<usize>() as f64 / total as f64)
}

pub fn avg_tokens(lengths: &[usize]) -> Result<f64> {
    if lengths.is_empty() {
        return Err(VskipError::domain("no lengths to average"));
    }
    Ok(lengths.iter().sum::<usize>() as f64 / lengths.len() as f64)
}

/// Pooled retention percentage per attribute category. Categories with no
/// labelled positions anywhere are left out.
pub fn varr(masks: &[Mask], attributes: &[BTreeMap<String, Vec<usize>>]) -> Result<BTreeMap<String, f64>> {
    if masks.len() != attributes.len() {
        return Err(VskipError::domain("masks and attribute maps differ in count"));
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (mask, attrs) in masks.iter().zip(attributes) {
        for (cat, positions) in attrs {
            let entry = counts.entry(cat.as_str()).or_default();
            for &p in positions {
                if p >= mask.len() {
                    return Err(VskipError::domain(format!(
                        "attribute {cat} position {p} out of range for mask of length {}",
                        mask.len()
                    )));
                }
                entry.0 += usize::from(mask.get(p));
                entry.1 += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .filter(|(_, (_, total))| *total > 0)
        .map(|(cat, (kept, total))| (cat.to_string(), 100.0 * kept as f64 / total as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

/// Confusion-matrix statistics with "yes" as the positive class.
pub fn pope_stats(preds: &[YesNo], labels: &[YesNo]) -> Result<PopeStats> {
    check_pairs(preds.len(), labels.len())?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (p, l) in preds.iter().zip(labels) {
        match (p, l) {
            (YesNo::Yes, YesNo::Yes) => tp += 1,
            (YesNo::Yes, YesNo::No) => fp += 1,
            (YesNo::No, YesNo::Yes) => fn_ += 1,
            (YesNo::No, YesNo::No) => tn += 1,
        }
    }
    let n = preds.len() as f64;
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(PopeStats {
        yes_ratio: (tp + fp) as f64 / n,
        accuracy: (tp + tn) as f64 / n,
        precision,
        recall,
        f1,
    })
}
