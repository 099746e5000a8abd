//! Dual-path token scores.
//!
//! The textual path is plain surprisal, `-log p`. The visual path sums each
//! attention row over the image-patch keys, takes the max over heads in every
//! focus layer and averages those maxima over the focus layers.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VskipError};
use crate::trace::{AttentionLayout, AttentionTensor, ReasoningTrace, TraceRecord, VisualMass};

/// Fractional depth range of the layers that feed the visual score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub focus_lo: f64,
    pub focus_hi: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { focus_lo: 0.25, focus_hi: 0.75 }
    }
}

impl ScoringConfig {
    pub fn new(focus_lo: f64, focus_hi: f64) -> Result<Self> {
        let cfg = ScoringConfig { focus_lo, focus_hi };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if !(0.0 <= self.focus_lo && self.focus_lo < self.focus_hi && self.focus_hi <= 1.0) {
            return Err(VskipError::Config(format!(
                "focus range ({}, {}) must satisfy 0 <= lo < hi <= 1",
                self.focus_lo, self.focus_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScoredTrace<'a> {
    pub trace: &'a ReasoningTrace,
    pub s_text: Vec<f64>,
    pub s_vis: Vec<f64>,
}

pub fn textual_score(logprob: f64) -> Result<f64> {
    if !logprob.is_finite() || logprob > 0.0 {
        return Err(VskipError::domain(format!("logprob {logprob} must be finite and <= 0")));
    }
    Ok(0.0 - logprob)
}

/// Attention mass a single row puts on the image keys.
pub fn visual_mass(attn_row: &[f64], image_keys: &[usize]) -> Result<f64> {
    let mut sum = 0.0;
    for &k in image_keys {
        let w = attn_row.get(k).ok_or_else(|| {
            VskipError::domain(format!("image key {k} out of bounds for row of {}", attn_row.len()))
        })?;
        sum += w;
    }
    Ok(sum)
}

/// Layer indices `floor(lo*L) .. ceil(hi*L)`, falling back to the middle layer.
pub fn select_focus_layers(total_layers: usize, lo: f64, hi: f64) -> Vec<usize> {
    let l = total_layers as f64;
    let start = (lo * l).floor().max(0.0) as usize;
    let end = ((hi * l).ceil() as usize).min(total_layers);
    if start >= end {
        return vec![total_layers / 2];
    }
    (start..end).collect()
}

/// Mean over focus layers of the max-over-heads visual mass.
pub fn visual_anchor_score(mass: &[Vec<f64>], focus: &[usize]) -> Result<f64> {
    if focus.is_empty() {
        return Err(VskipError::domain("focus layer set is empty"));
    }
    let mut total = 0.0;
    for &l in focus {
        let heads = mass
            .get(l)
            .ok_or_else(|| VskipError::domain(format!("focus layer {l} out of range for {} layers", mass.len())))?;
        if heads.is_empty() {
            return Err(VskipError::domain(format!("layer {l} has no heads")));
        }
        total += heads.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(total / focus.len() as f64)
}

/// Collapses a full tensor to the per-token visual mass layout.
pub fn derive_visual_mass(att: &AttentionTensor, image_keys: &[usize]) -> Result<VisualMass> {
    let mut values = Vec::with_capacity(att.layers() * att.heads() * att.queries());
    for l in 0..att.layers() {
        for h in 0..att.heads() {
            for t in 0..att.queries() {
                values.push(visual_mass(att.row(l, h, t), image_keys)?);
            }
        }
    }
    VisualMass::new(att.layers(), att.heads(), att.queries(), values)
}

pub fn score_trace<'a>(trace: &'a ReasoningTrace, cfg: &ScoringConfig) -> Result<ScoredTrace<'a>> {
    cfg.check()?;
    let s_text = trace
        .tokens
        .iter()
        .map(|t| textual_score(t.logprob))
        .collect::<Result<Vec<_>>>()?;

    let derived;
    let mass = match &trace.attention {
        AttentionLayout::VisualMass(m) => m,
        AttentionLayout::Full(att) => {
            derived = derive_visual_mass(att, &trace.image_key_indices)?;
            &derived
        }
    };
    if mass.queries() != s_text.len() {
        return Err(VskipError::domain(format!(
            "attention has {} queries for {} tokens",
            mass.queries(),
            s_text.len()
        )));
    }
    let focus = select_focus_layers(mass.layers(), cfg.focus_lo, cfg.focus_hi);
    let s_vis = (0..mass.queries())
        .map(|t| {
            let per_layer: Vec<Vec<f64>> = (0..mass.layers())
                .map(|l| (0..mass.heads()).map(|h| mass.get(l, h, t)).collect())
                .collect();
            visual_anchor_score(&per_layer, &focus)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoredTrace { trace, s_text, s_vis })
}

/// Trace line with both score arrays appended, for debugging dumps.
#[derive(Debug, Serialize)]
pub struct ScoredRecord {
    #[serde(flatten)]
    pub trace: TraceRecord,
    pub s_text: Vec<f64>,
    pub s_vis: Vec<f64>,
}

impl ScoredRecord {
    pub fn from_scored(scored: &ScoredTrace<'_>) -> Self {
        ScoredRecord {
            trace: TraceRecord::from_trace(scored.trace),
            s_text: scored.s_text.clone(),
            s_vis: scored.s_vis.clone(),
        }
    }
}
