use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VskipError};
use crate::gating::{compress, strategy_mask, GateConfig};
use crate::metrics::{anls_pair, canonicalize, ANLS_TAU};
use crate::scoring::{score_trace, ScoringConfig};
use crate::toy::{image_features, train_adapter, DistillExample, ToyConfig, ToyReasonerParams, TrainConfig, TrainOutcome};
use crate::trace::{read_jsonl, write_jsonl, ChainRecord, ReasoningTrace};
use crate::vocab::Vocabulary;

/// How a teacher answer is judged correct before its trace is kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    #[default]
    Exact,
    /// Keep when `anls_pair(pred, gold) >= theta`.
    Anls(f64),
}

impl FilterMode {
    pub fn accepts(&self, pred: &str, gold: &str) -> bool {
        match *self {
            FilterMode::Exact => canonicalize(pred) == canonicalize(gold),
            FilterMode::Anls(theta) => anls_pair(pred, gold, ANLS_TAU) >= theta,
        }
    }
}

impl FromStr for FilterMode {
    type Err = VskipError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "exact" {
            return Ok(FilterMode::Exact);
        }
        let theta = s
            .strip_prefix("anls:")
            .and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| VskipError::Config(format!("unknown filter mode {s:?}; expected exact or anls:<theta>")))?;
        if !(0.0..=1.0).contains(&theta) {
            return Err(VskipError::Config(format!("anls threshold {theta} must lie in [0, 1]")));
        }
        Ok(FilterMode::Anls(theta))
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterMode::Exact => f.write_str("exact"),
            FilterMode::Anls(t) => write!(f, "anls:{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub scoring: ScoringConfig,
    pub gate: GateConfig,
    pub distill: TrainConfig,
    pub filter: FilterMode,
    pub toy: ToyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scoring: ScoringConfig::default(),
            gate: GateConfig::new(0.5, crate::gating::Strategy::Union).expect("valid default gate"),
            distill: TrainConfig::default(),
            filter: FilterMode::Exact,
            toy: ToyConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn check(&self) -> Result<()> {
        self.scoring.check()?;
        self.gate.check()?;
        self.toy.check()
    }
}

/// Keeps traces whose predicted answer matches the reference, in order.
pub fn filter_correct(traces: &[ReasoningTrace], mode: FilterMode) -> Vec<ReasoningTrace> {
    traces.iter().filter(|t| mode.accepts(&t.answer_pred, &t.answer_gt)).cloned().collect()
}

/// One distillation example plus the audit trail of how it was pruned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(flatten)]
    pub chain: ChainRecord,
    pub image_id: String,
    pub question: String,
    pub question_ids: Vec<u32>,
    pub compressed_ids: Vec<u32>,
    pub s_text: Vec<f64>,
    pub s_vis: Vec<f64>,
}

fn phase1_record(trace: &ReasoningTrace, cfg: &PipelineConfig, vocab: &Vocabulary) -> Result<DatasetRecord> {
    let scored = score_trace(trace, &cfg.scoring)?;
    let mask = strategy_mask(&scored, &cfg.gate)?;
    let chain = compress(trace, &mask)?;
    Ok(DatasetRecord {
        compressed_ids: chain.retained_tokens.iter().map(|t| t.token_id).collect(),
        chain: chain.to_record(),
        image_id: trace.image_id.clone(),
        question: trace.question.clone(),
        question_ids: vocab.encode(&trace.question),
        s_text: scored.s_text,
        s_vis: scored.s_vis,
    })
}

/// Filter, score, gate and compress. Traces are processed in parallel and
/// collected in input order.
pub fn run_phase1(traces: &[ReasoningTrace], cfg: &PipelineConfig) -> Result<Vec<DatasetRecord>> {
    cfg.check()?;
    let kept = filter_correct(traces, cfg.filter);
    if kept.is_empty() {
        return Err(VskipError::Pipeline(format!(
            "no trace out of {} survives {} filtering",
            traces.len(),
            cfg.filter
        )));
    }
    let vocab = Vocabulary::standard(cfg.toy.vocab_size);
    kept.par_iter().map(|t| phase1_record(t, cfg, &vocab)).collect()
}

/// Recomputes scores and mask from `trace` and checks they match `record`.
pub fn audit_record(trace: &ReasoningTrace, record: &DatasetRecord, cfg: &PipelineConfig) -> Result<bool> {
    let vocab = Vocabulary::standard(cfg.toy.vocab_size);
    Ok(phase1_record(trace, cfg, &vocab)? == *record)
}

pub fn save_dataset(records: &[DatasetRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(records, path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    read_jsonl(path)
}

/// Distillation examples for a toy model of shape `config`.
pub fn to_examples(dataset: &[DatasetRecord], config: &ToyConfig) -> Result<Vec<DistillExample>> {
    dataset
        .iter()
        .map(|r| {
            let vocab = config.vocab_size as u32;
            if let Some(id) = r.question_ids.iter().chain(&r.compressed_ids).find(|&&id| id >= vocab) {
                return Err(VskipError::domain(format!(
                    "record {} has token id {id} outside the toy vocabulary of {vocab}",
                    r.chain.trace_id
                )));
            }
            let needed = config.image_patches + r.question_ids.len() + r.compressed_ids.len();
            if needed > config.max_seq + 1 {
                return Err(VskipError::domain(format!(
                    "record {} needs {needed} positions, more than max_seq {}",
                    r.chain.trace_id, config.max_seq
                )));
            }
            Ok(DistillExample {
                image: image_features(&r.image_id, config.image_patches, config.d_model),
                question_ids: r.question_ids.clone(),
                target_ids: r.compressed_ids.clone(),
            })
        })
        .collect()
}

/// Trains an adapter on the compressed chains with the base model frozen.
pub fn run_phase2(dataset: &[DatasetRecord], base: &ToyReasonerParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(VskipError::Pipeline("distillation dataset is empty".into()));
    }
    let examples = to_examples(dataset, &base.config)?;
    train_adapter(base, &examples, cfg)
}

/// Writes a `step,loss` CSV.
pub fn write_curve(curve: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, loss) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{loss}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
