//! Trace data model and the JSONL formats shared by every stage.
//!
//! A trace stores one generated rationale: the tokens with their log-probs,
//! the attention the model paid while emitting each token, and the indices of
//! the image-patch keys. Attention comes in one of two layouts, a full
//! `[L][H][Tq][Tk]` tensor or the precomputed visual mass `[L][H][Tq]`.
//!
//! Key axis convention for full tensors: the prompt keys (image patches and
//! question tokens) come first, followed by the generated tokens. Row `t` is
//! the attention of the query that emitted token `t`, so it sees the prompt
//! plus the `t` previously generated tokens. The last generated token never
//! serves as a key, hence `Tk = prompt_len + T - 1`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VskipError};

/// Row sums of attention weights must be within this of 1.
pub const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub text: String,
    /// Informational only; all logic keys on position.
    pub token_id: u32,
    /// Natural log of the model probability of this token.
    pub logprob: f64,
}

impl TokenRecord {
    pub fn new(text: impl Into<String>, token_id: u32, logprob: f64) -> Self {
        TokenRecord { text: text.into(), token_id, logprob }
    }
}

/// Dense post-softmax attention weights indexed `[layer][head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    layers: usize,
    heads: usize,
    queries: usize,
    keys: usize,
    weights: Vec<f64>,
}

impl AttentionTensor {
    pub fn new(layers: usize, heads: usize, queries: usize, keys: usize, weights: Vec<f64>) -> Result<Self> {
        if layers == 0 || heads == 0 || queries == 0 || keys == 0 {
            return Err(VskipError::domain("attention dimensions must be positive"));
        }
        if weights.len() != layers * heads * queries * keys {
            return Err(VskipError::domain(format!(
                "attention buffer has {} values, expected {}",
                weights.len(),
                layers * heads * queries * keys
            )));
        }
        Ok(AttentionTensor { layers, heads, queries, keys, weights })
    }

    pub fn zeros(layers: usize, heads: usize, queries: usize, keys: usize) -> Result<Self> {
        Self::new(layers, heads, queries, keys, vec![0.0; layers * heads * queries * keys])
    }

    pub fn from_nested(nested: &[Vec<Vec<Vec<f64>>>]) -> std::result::Result<Self, String> {
        let layers = nested.len();
        let heads = nested.first().map_or(0, |l| l.len());
        let queries = nested.first().and_then(|l| l.first()).map_or(0, |h| h.len());
        let keys = nested
            .first()
            .and_then(|l| l.first())
            .and_then(|h| h.first())
            .map_or(0, |q| q.len());
        if layers == 0 || heads == 0 || queries == 0 || keys == 0 {
            return Err("attention_full has an empty dimension".into());
        }
        let mut weights = Vec::with_capacity(layers * heads * queries * keys);
        for (l, layer) in nested.iter().enumerate() {
            if layer.len() != heads {
                return Err(format!("layer {l} has {} heads, expected {heads}", layer.len()));
            }
            for (h, head) in layer.iter().enumerate() {
                if head.len() != queries {
                    return Err(format!("layer {l} head {h} has {} rows, expected {queries}", head.len()));
                }
                for (t, row) in head.iter().enumerate() {
                    if row.len() != keys {
                        return Err(format!(
                            "row ({l},{h},{t}) has {} keys, expected {keys}",
                            row.len()
                        ));
                    }
                    weights.extend_from_slice(row);
                }
            }
        }
        Ok(AttentionTensor { layers, heads, queries, keys, weights })
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        (0..self.layers)
            .map(|l| {
                (0..self.heads)
                    .map(|h| (0..self.queries).map(|t| self.row(l, h, t).to_vec()).collect())
                    .collect()
            })
            .collect()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }
    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn queries(&self) -> usize {
        self.queries
    }
    pub fn keys(&self) -> usize {
        self.keys
    }

    fn offset(&self, layer: usize, head: usize, query: usize) -> usize {
        ((layer * self.heads + head) * self.queries + query) * self.keys
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let o = self.offset(layer, head, query);
        &self.weights[o..o + self.keys]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize, query: usize) -> &mut [f64] {
        let o = self.offset(layer, head, query);
        &mut self.weights[o..o + self.keys]
    }

    /// Number of prompt keys implied by the key axis convention.
    pub fn prompt_len(&self) -> Option<usize> {
        (self.keys + 1).checked_sub(self.queries).filter(|&p| p > 0)
    }
}

/// Per-token visual attention mass indexed `[layer][head][query]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualMass {
    layers: usize,
    heads: usize,
    queries: usize,
    values: Vec<f64>,
}

impl VisualMass {
    pub fn new(layers: usize, heads: usize, queries: usize, values: Vec<f64>) -> Result<Self> {
        if layers == 0 || heads == 0 || queries == 0 {
            return Err(VskipError::domain("visual mass dimensions must be positive"));
        }
        if values.len() != layers * heads * queries {
            return Err(VskipError::domain(format!(
                "visual mass buffer has {} values, expected {}",
                values.len(),
                layers * heads * queries
            )));
        }
        Ok(VisualMass { layers, heads, queries, values })
    }

    pub fn from_nested(nested: &[Vec<Vec<f64>>]) -> std::result::Result<Self, String> {
        let layers = nested.len();
        let heads = nested.first().map_or(0, |l| l.len());
        let queries = nested.first().and_then(|l| l.first()).map_or(0, |h| h.len());
        if layers == 0 || heads == 0 || queries == 0 {
            return Err("visual_mass has an empty dimension".into());
        }
        let mut values = Vec::with_capacity(layers * heads * queries);
        for (l, layer) in nested.iter().enumerate() {
            if layer.len() != heads {
                return Err(format!("layer {l} has {} heads, expected {heads}", layer.len()));
            }
            for (h, head) in layer.iter().enumerate() {
                if head.len() != queries {
                    return Err(format!("layer {l} head {h} has {} values, expected {queries}", head.len()));
                }
                values.extend_from_slice(head);
            }
        }
        Ok(VisualMass { layers, heads, queries, values })
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.layers)
            .map(|l| {
                (0..self.heads)
                    .map(|h| (0..self.queries).map(|t| self.get(l, h, t)).collect())
                    .collect()
            })
            .collect()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }
    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn get(&self, layer: usize, head: usize, query: usize) -> f64 {
        self.values[(layer * self.heads + head) * self.queries + query]
    }

    /// The `[L][H]` slice for one token, flattened row-major.
    pub fn token_slice(&self, query: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layers * self.heads);
        for l in 0..self.layers {
            for h in 0..self.heads {
                out.push(self.get(l, h, query));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionLayout {
    Full(AttentionTensor),
    VisualMass(VisualMass),
}

impl AttentionLayout {
    pub fn layers(&self) -> usize {
        match self {
            AttentionLayout::Full(a) => a.layers(),
            AttentionLayout::VisualMass(m) => m.layers(),
        }
    }
    pub fn heads(&self) -> usize {
        match self {
            AttentionLayout::Full(a) => a.heads(),
            AttentionLayout::VisualMass(m) => m.heads(),
        }
    }
    pub fn queries(&self) -> usize {
        match self {
            AttentionLayout::Full(a) => a.queries(),
            AttentionLayout::VisualMass(m) => m.queries(),
        }
    }
    pub fn is_full(&self) -> bool {
        matches!(self, AttentionLayout::Full(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningTrace {
    pub trace_id: String,
    pub question: String,
    pub image_id: String,
    /// Image-patch positions on the key axis, sorted and deduplicated.
    pub image_key_indices: Vec<usize>,
    pub tokens: Vec<TokenRecord>,
    pub attention: AttentionLayout,
    pub answer_gt: String,
    pub answer_pred: String,
    /// Attribute category (color, shape, object, ...) to token positions.
    pub attributes: BTreeMap<String, Vec<usize>>,
}

impl ReasoningTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.token_id).collect()
    }
}

/// Binary retention mask over token positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn new(bits: Vec<bool>) -> Self {
        Mask(bits)
    }
    pub fn ones(len: usize) -> Self {
        Mask(vec![true; len])
    }
    pub fn zeros(len: usize) -> Self {
        Mask(vec![false; len])
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn popcount(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }
    pub fn set(&mut self, i: usize, v: bool) {
        self.0[i] = v;
    }
    pub fn bits(&self) -> &[bool] {
        &self.0
    }
    pub fn retained_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
    pub fn or(&self, other: &Mask) -> Mask {
        Mask(self.0.iter().zip(&other.0).map(|(a, b)| *a || *b).collect())
    }
    pub fn and(&self, other: &Mask) -> Mask {
        Mask(self.0.iter().zip(&other.0).map(|(a, b)| *a && *b).collect())
    }
    pub fn to_u8(&self) -> Vec<u8> {
        self.0.iter().map(|&b| b as u8).collect()
    }
}

impl From<Vec<bool>> for Mask {
    fn from(v: Vec<bool>) -> Self {
        Mask(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedChain {
    pub trace_id: String,
    pub mask: Mask,
    pub retained_tokens: Vec<TokenRecord>,
    pub actual_ratio: f64,
}

impl CompressedChain {
    pub fn to_record(&self) -> ChainRecord {
        ChainRecord {
            trace_id: self.trace_id.clone(),
            mask: self.mask.to_u8(),
            retained: self.retained_tokens.iter().map(|t| t.text.clone()).collect(),
            actual_ratio: self.actual_ratio,
        }
    }
}

/// One invariant broken by a trace.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoTokens,
    EmptyText { position: usize },
    InvalidLogprob { position: usize, value: f64 },
    LengthMismatch { field: &'static str, expected: usize, found: usize },
    AttentionShape { detail: String },
    WeightRange { layer: usize, head: usize, query: usize, key: usize, value: f64 },
    RowNormalization { layer: usize, head: usize, query: usize, sum: f64 },
    CausalMask { layer: usize, head: usize, query: usize, key: usize },
    MassRange { layer: usize, head: usize, query: usize, value: f64 },
    EmptyImageSet,
    ImageKeyOutOfRange { index: usize, keys: usize },
    ImageKeyOverlapsText { index: usize },
    AttributeOutOfRange { category: String, position: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            NoTokens => write!(f, "tokens: trace has no tokens"),
            EmptyText { position } => write!(f, "tokens[{position}]: empty text"),
            InvalidLogprob { position, value } => {
                write!(f, "logprobs[{position}]: {value} is not a finite value <= 0")
            }
            LengthMismatch { field, expected, found } => {
                write!(f, "{field}: length {found}, expected {expected}")
            }
            AttentionShape { detail } => write!(f, "attention: {detail}"),
            WeightRange { layer, head, query, key, value } => {
                write!(f, "attention_full[{layer}][{head}][{query}][{key}]: {value} outside [0, 1]")
            }
            RowNormalization { layer, head, query, sum } => {
                write!(f, "attention_full[{layer}][{head}][{query}]: row sums to {sum}, expected 1")
            }
            CausalMask { layer, head, query, key } => write!(
                f,
                "attention_full[{layer}][{head}][{query}][{key}]: nonzero weight on a masked key"
            ),
            MassRange { layer, head, query, value } => {
                write!(f, "visual_mass[{layer}][{head}][{query}]: {value} outside [0, 1]")
            }
            EmptyImageSet => write!(f, "image_key_indices: empty"),
            ImageKeyOutOfRange { index, keys } => {
                write!(f, "image_key_indices: {index} out of range for {keys} keys")
            }
            ImageKeyOverlapsText { index } => {
                write!(f, "image_key_indices: {index} overlaps a generated-token key")
            }
            AttributeOutOfRange { category, position } => {
                write!(f, "attributes.{category}: position {position} out of range")
            }
        }
    }
}

/// Checks every invariant of a trace. An empty result means the trace is valid.
pub fn validate_trace(trace: &ReasoningTrace) -> Vec<Violation> {
    let mut out = Vec::new();
    let t_len = trace.tokens.len();
    if t_len == 0 {
        out.push(Violation::NoTokens);
    }
    for (i, tok) in trace.tokens.iter().enumerate() {
        if tok.text.is_empty() {
            out.push(Violation::EmptyText { position: i });
        }
        if !tok.logprob.is_finite() || tok.logprob > 0.0 {
            out.push(Violation::InvalidLogprob { position: i, value: tok.logprob });
        }
    }
    if trace.attention.queries() != t_len {
        out.push(Violation::LengthMismatch {
            field: "attention queries",
            expected: t_len,
            found: trace.attention.queries(),
        });
    }
    if trace.image_key_indices.is_empty() {
        out.push(Violation::EmptyImageSet);
    }

    match &trace.attention {
        AttentionLayout::Full(att) => validate_full(att, trace, &mut out),
        AttentionLayout::VisualMass(mass) => {
            for l in 0..mass.layers() {
                for h in 0..mass.heads() {
                    for t in 0..mass.queries() {
                        let v = mass.get(l, h, t);
                        if !v.is_finite() || !(0.0..=1.0 + ROW_SUM_TOL).contains(&v) {
                            out.push(Violation::MassRange { layer: l, head: h, query: t, value: v });
                        }
                    }
                }
            }
        }
    }

    for (cat, positions) in &trace.attributes {
        for &p in positions {
            if p >= t_len {
                out.push(Violation::AttributeOutOfRange { category: cat.clone(), position: p });
            }
        }
    }
    out
}

fn validate_full(att: &AttentionTensor, trace: &ReasoningTrace, out: &mut Vec<Violation>) {
    let keys = att.keys();
    let prompt_len = att.prompt_len();
    match prompt_len {
        None => out.push(Violation::AttentionShape {
            detail: format!(
                "{keys} keys cannot hold a prompt plus {} generated tokens",
                att.queries()
            ),
        }),
        Some(p) => {
            for &idx in &trace.image_key_indices {
                if idx >= keys {
                    out.push(Violation::ImageKeyOutOfRange { index: idx, keys });
                } else if idx >= p {
                    out.push(Violation::ImageKeyOverlapsText { index: idx });
                }
            }
        }
    }
    for l in 0..att.layers() {
        for h in 0..att.heads() {
            for t in 0..att.queries() {
                let row = att.row(l, h, t);
                let mut sum = 0.0;
                for (k, &w) in row.iter().enumerate() {
                    if !w.is_finite() || !(0.0..=1.0).contains(&w) {
                        out.push(Violation::WeightRange { layer: l, head: h, query: t, key: k, value: w });
                    }
                    if let Some(p) = prompt_len {
                        if k >= p + t && w != 0.0 {
                            out.push(Violation::CausalMask { layer: l, head: h, query: t, key: k });
                        }
                    }
                    sum += w;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL || !sum.is_finite() {
                    out.push(Violation::RowNormalization { layer: l, head: h, query: t, sum });
                }
            }
        }
    }
}

/// One line of the trace JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trace_id: String,
    pub question: String,
    pub image_id: String,
    pub image_key_indices: Vec<usize>,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub answer_gt: String,
    pub answer_pred: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_full: Option<Vec<Vec<Vec<Vec<f64>>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_mass: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<BTreeMap<String, Vec<usize>>>,
}

impl TraceRecord {
    pub fn from_trace(trace: &ReasoningTrace) -> Self {
        let (attention_full, visual_mass) = match &trace.attention {
            AttentionLayout::Full(a) => (Some(a.to_nested()), None),
            AttentionLayout::VisualMass(m) => (None, Some(m.to_nested())),
        };
        TraceRecord {
            trace_id: trace.trace_id.clone(),
            question: trace.question.clone(),
            image_id: trace.image_id.clone(),
            image_key_indices: trace.image_key_indices.clone(),
            tokens: trace.tokens.iter().map(|t| t.text.clone()).collect(),
            token_ids: trace.token_ids(),
            logprobs: trace.tokens.iter().map(|t| t.logprob).collect(),
            answer_gt: trace.answer_gt.clone(),
            answer_pred: trace.answer_pred.clone(),
            attention_full,
            visual_mass,
            attributes: if trace.attributes.is_empty() { None } else { Some(trace.attributes.clone()) },
        }
    }

    /// Builds the in-memory trace; structural problems come back as violations.
    pub fn into_trace(self) -> std::result::Result<ReasoningTrace, Vec<Violation>> {
        let mut violations = Vec::new();
        let n = self.tokens.len();
        if self.token_ids.len() != n {
            violations.push(Violation::LengthMismatch { field: "token_ids", expected: n, found: self.token_ids.len() });
        }
        if self.logprobs.len() != n {
            violations.push(Violation::LengthMismatch { field: "logprobs", expected: n, found: self.logprobs.len() });
        }
        let attention = match (self.attention_full, self.visual_mass) {
            (Some(full), None) => AttentionTensor::from_nested(&full).map(AttentionLayout::Full),
            (None, Some(mass)) => VisualMass::from_nested(&mass).map(AttentionLayout::VisualMass),
            (Some(_), Some(_)) => Err("both attention_full and visual_mass present".to_string()),
            (None, None) => Err("one of attention_full or visual_mass is required".to_string()),
        };
        let attention = match attention {
            Ok(a) => a,
            Err(detail) => {
                violations.push(Violation::AttentionShape { detail });
                return Err(violations);
            }
        };
        if !violations.is_empty() {
            return Err(violations);
        }
        let tokens = self
            .tokens
            .into_iter()
            .zip(self.token_ids)
            .zip(self.logprobs)
            .map(|((text, token_id), logprob)| TokenRecord { text, token_id, logprob })
            .collect();
        let mut image_key_indices = self.image_key_indices;
        image_key_indices.sort_unstable();
        image_key_indices.dedup();
        Ok(ReasoningTrace {
            trace_id: self.trace_id,
            question: self.question,
            image_id: self.image_id,
            image_key_indices,
            tokens,
            attention,
            answer_gt: self.answer_gt,
            answer_pred: self.answer_pred,
            attributes: self.attributes.unwrap_or_default(),
        })
    }
}

/// Parses one JSONL line into a validated trace. `line` is 1-based and only
/// used for error reporting.
pub fn parse_trace_line(text: &str, line: usize) -> Result<ReasoningTrace> {
    let record: TraceRecord =
        serde_json::from_str(text).map_err(|e| VskipError::Parse { line, message: e.to_string() })?;
    let trace = record
        .into_trace()
        .map_err(|violations| VskipError::Validation { line, violations })?;
    let violations = validate_trace(&trace);
    if !violations.is_empty() {
        return Err(VskipError::Validation { line, violations });
    }
    Ok(trace)
}

/// Reads a trace JSONL file. Blank lines are skipped.
pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<ReasoningTrace>> {
    let reader = BufReader::new(File::open(path)?);
    let mut traces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        traces.push(parse_trace_line(&line, i + 1)?);
    }
    Ok(traces)
}

pub fn save_traces(traces: &[ReasoningTrace], path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<TraceRecord> = traces.iter().map(TraceRecord::from_trace).collect();
    write_jsonl(&records, path)
}

/// One line of the compressed-chain JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub trace_id: String,
    pub mask: Vec<u8>,
    pub retained: Vec<String>,
    pub actual_ratio: f64,
}

impl ChainRecord {
    pub fn mask(&self) -> Mask {
        Mask::new(self.mask.iter().map(|&b| b != 0).collect())
    }

    fn check(&self) -> std::result::Result<(), String> {
        if let Some(b) = self.mask.iter().find(|&&b| b > 1) {
            return Err(format!("mask value {b} is not 0 or 1"));
        }
        let kept = self.mask.iter().filter(|&&b| b == 1).count();
        if kept != self.retained.len() {
            return Err(format!("mask keeps {kept} tokens but {} are listed", self.retained.len()));
        }
        Ok(())
    }
}

pub fn save_compressed(chains: &[CompressedChain], path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<ChainRecord> = chains.iter().map(CompressedChain::to_record).collect();
    write_jsonl(&records, path)
}

pub fn load_compressed(path: impl AsRef<Path>) -> Result<Vec<ChainRecord>> {
    let records: Vec<ChainRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        r.check().map_err(|message| VskipError::Parse { line: i + 1, message })?;
    }
    Ok(records)
}

pub(crate) fn write_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| VskipError::Parse { line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}
