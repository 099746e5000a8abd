//! Retention masks from dual-path scores.
//!
//! Thresholds are per sequence. For a target retention `gamma` each path keeps
//! every token whose score is at least the `ceil(gamma * T)`-th largest score
//! of that path, so ties can push retention above `gamma`. The union gate ORs
//! the two paths; the remaining strategies are the baselines and ablations it
//! is compared against.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VskipError};
use crate::scoring::ScoredTrace;
pub use crate::trace::Mask;
use crate::trace::{CompressedChain, ReasoningTrace};
use crate::vocab::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Union,
    TextOnly,
    VisionOnly,
    Intersection,
    Random,
    Truncation,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Union,
        Strategy::TextOnly,
        Strategy::VisionOnly,
        Strategy::Intersection,
        Strategy::Random,
        Strategy::Truncation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Union => "union",
            Strategy::TextOnly => "text_only",
            Strategy::VisionOnly => "vision_only",
            Strategy::Intersection => "intersection",
            Strategy::Random => "random",
            Strategy::Truncation => "truncation",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = VskipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(Strategy::Union),
            "text" | "text_only" => Ok(Strategy::TextOnly),
            "vision" | "vision_only" => Ok(Strategy::VisionOnly),
            "intersection" => Ok(Strategy::Intersection),
            "random" => Ok(Strategy::Random),
            "truncation" => Ok(Strategy::Truncation),
            other => Err(VskipError::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Target fraction of tokens retained, in (0, 1].
    pub gamma: f64,
    pub strategy: Strategy,
    pub seed: u64,
    /// Positions forced to 1 after gating. Empty by default.
    #[serde(default)]
    pub protect_positions: Vec<usize>,
}

impl GateConfig {
    pub fn new(gamma: f64, strategy: Strategy) -> Result<Self> {
        let cfg = GateConfig { gamma, strategy, seed: 0, protect_positions: Vec::new() };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn check(&self) -> Result<()> {
        check_gamma(self.gamma)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(VskipError::domain(format!("gamma {gamma} must lie in (0, 1]")));
    }
    Ok(())
}

/// `ceil(gamma * len)`, at least 1. The small slack absorbs products such as
/// `0.57 * 100 = 57.00000000000001`.
pub fn keep_count(gamma: f64, len: usize) -> usize {
    let k = (gamma * len as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(len)
}

/// Nearest-rank threshold: the `ceil(gamma * n)`-th largest score.
pub fn percentile_threshold(scores: &[f64], gamma: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(VskipError::domain("cannot threshold an empty score array"));
    }
    check_gamma(gamma)?;
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(VskipError::domain(format!("score {bad} is not comparable")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[keep_count(gamma, scores.len()) - 1])
}

/// Keeps every position scoring at least the path's threshold.
pub fn single_path_mask(scores: &[f64], gamma: f64) -> Result<Mask> {
    let tau = percentile_threshold(scores, gamma)?;
    Ok(Mask::new(scores.iter().map(|&s| s >= tau).collect()))
}

pub fn union_mask(s_text: &[f64], s_vis: &[f64], gamma: f64) -> Result<Mask> {
    check_lengths(s_text, s_vis)?;
    Ok(single_path_mask(s_text, gamma)?.or(&single_path_mask(s_vis, gamma)?))
}

fn check_lengths(s_text: &[f64], s_vis: &[f64]) -> Result<()> {
    if s_text.len() != s_vis.len() {
        return Err(VskipError::domain(format!(
            "score arrays differ in length: {} vs {}",
            s_text.len(),
            s_vis.len()
        )));
    }
    Ok(())
}

/// Seeded sample of exactly `keep_count(gamma, len)` positions.
///
/// The stream is a ChaCha8 generator seeded with `seed ^ fnv1a64(trace_id)`.
/// A partial Fisher-Yates shuffle over `0..len` runs for `k` steps, step `i`
/// swapping slot `i` with a uniform slot in `i..len`; the first `k` slots are
/// kept.
pub fn random_mask(len: usize, gamma: f64, seed: u64, trace_id: &str) -> Mask {
    let k = keep_count(gamma, len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(trace_id.as_bytes()));
    let mut slots: Vec<usize> = (0..len).collect();
    for i in 0..k {
        let j = rng.gen_range(i..len);
        slots.swap(i, j);
    }
    let mut mask = Mask::zeros(len);
    for &p in &slots[..k] {
        mask.set(p, true);
    }
    mask
}

pub fn truncation_mask(len: usize, gamma: f64) -> Mask {
    let k = keep_count(gamma, len);
    Mask::new((0..len).map(|i| i < k).collect())
}

/// Mask for raw score arrays; `trace_id` only feeds the random strategy.
pub fn mask_from_scores(s_text: &[f64], s_vis: &[f64], trace_id: &str, cfg: &GateConfig) -> Result<Mask> {
    cfg.check()?;
    check_lengths(s_text, s_vis)?;
    let len = s_text.len();
    if len == 0 {
        return Err(VskipError::domain("cannot gate an empty sequence"));
    }
    let mut mask = match cfg.strategy {
        Strategy::Union => union_mask(s_text, s_vis, cfg.gamma)?,
        Strategy::TextOnly => single_path_mask(s_text, cfg.gamma)?,
        Strategy::VisionOnly => single_path_mask(s_vis, cfg.gamma)?,
        Strategy::Intersection => single_path_mask(s_text, cfg.gamma)?.and(&single_path_mask(s_vis, cfg.gamma)?),
        Strategy::Random => random_mask(len, cfg.gamma, cfg.seed, trace_id),
        Strategy::Truncation => truncation_mask(len, cfg.gamma),
    };
    for &p in &cfg.protect_positions {
        if p >= len {
            return Err(VskipError::domain(format!("protected position {p} out of range for length {len}")));
        }
        mask.set(p, true);
    }
    Ok(mask)
}

pub fn strategy_mask(scored: &ScoredTrace<'_>, cfg: &GateConfig) -> Result<Mask> {
    mask_from_scores(&scored.s_text, &scored.s_vis, &scored.trace.trace_id, cfg)
}

pub fn compress(trace: &ReasoningTrace, mask: &Mask) -> Result<CompressedChain> {
    if mask.len() != trace.tokens.len() {
        return Err(VskipError::domain(format!(
            "mask length {} does not match trace length {}",
            mask.len(),
            trace.tokens.len()
        )));
    }
    let retained_tokens: Vec<_> = mask.retained_positions().map(|i| trace.tokens[i].clone()).collect();
    let actual_ratio = if mask.is_empty() { 0.0 } else { retained_tokens.len() as f64 / mask.len() as f64 };
    Ok(CompressedChain { trace_id: trace.trace_id.clone(), mask: mask.clone(), retained_tokens, actual_ratio })
}
