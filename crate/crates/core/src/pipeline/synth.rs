//! Planted-anchor corpora.
//!
//! Each trace mixes three token kinds. Visual anchors (color, shape and object
//! words) are linguistically predictable but carry high visual mass. Textual
//! keys (number words) are surprising but carry filler-level visual mass.
//! Fillers are low on both paths. The answer is the sequence of anchors and
//! keys, so dropping any one of them loses the answer.

use std::collections::BTreeMap;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VskipError};
use crate::gating::keep_count;
use crate::toy::IMAGE_CONTENT_SEP;
use crate::trace::{validate_trace, AttentionLayout, ReasoningTrace, TokenRecord, VisualMass};
use crate::vocab::{Vocabulary, WordClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }

    fn valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_traces: usize,
    pub trace_len: usize,
    pub anchor_rate: f64,
    pub key_rate: f64,
    pub filler_surprisal: Range,
    pub anchor_surprisal: Range,
    pub key_surprisal: Range,
    pub anchor_mass: Range,
    pub filler_mass: Range,
    /// Fraction of traces whose predicted answer is corrupted.
    pub error_rate: f64,
    pub layers: usize,
    pub heads: usize,
    pub image_patches: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_traces: 200,
            trace_len: 20,
            anchor_rate: 0.2,
            key_rate: 0.1,
            filler_surprisal: Range::new(0.05, 1.0),
            anchor_surprisal: Range::new(0.01, 0.3),
            key_surprisal: Range::new(3.0, 6.0),
            anchor_mass: Range::new(0.7, 0.9),
            filler_mass: Range::new(0.0, 0.2),
            error_rate: 0.1,
            layers: 4,
            heads: 2,
            image_patches: 4,
            vocab_size: 64,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn anchors_per_trace(&self) -> usize {
        keep_count(self.anchor_rate, self.trace_len)
    }

    pub fn keys_per_trace(&self) -> usize {
        if self.key_rate > 0.0 {
            keep_count(self.key_rate, self.trace_len)
        } else {
            0
        }
    }

    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(VskipError::Config(m));
        if self.n_traces == 0 || self.trace_len == 0 {
            return fail("n_traces and trace_len must be positive".into());
        }
        if !(self.anchor_rate > 0.0 && self.anchor_rate < 1.0) {
            return fail(format!("anchor_rate {} must lie in (0, 1)", self.anchor_rate));
        }
        if self.anchor_rate * (self.trace_len as f64) < 1.0 {
            return fail(format!(
                "anchor_rate {} leaves no anchor in traces of length {}",
                self.anchor_rate, self.trace_len
            ));
        }
        if !(0.0..1.0).contains(&self.key_rate) || !(0.0..=1.0).contains(&self.error_rate) {
            return fail("key_rate must lie in [0, 1) and error_rate in [0, 1]".into());
        }
        if self.anchors_per_trace() + self.keys_per_trace() > self.trace_len {
            return fail("anchors and keys do not fit in a trace".into());
        }
        let ranges = [self.filler_surprisal, self.anchor_surprisal, self.key_surprisal, self.anchor_mass, self.filler_mass];
        if ranges.iter().any(|r| !r.valid()) {
            return fail("every range must satisfy lo <= hi".into());
        }
        if [self.filler_surprisal, self.anchor_surprisal, self.key_surprisal].iter().any(|r| r.lo < 0.0) {
            return fail("surprisal ranges must be non-negative".into());
        }
        if [self.anchor_mass, self.filler_mass].iter().any(|r| r.lo < 0.0 || r.hi > 1.0) {
            return fail("visual mass ranges must lie in [0, 1]".into());
        }
        if self.anchor_mass.lo <= self.filler_mass.hi {
            return fail("anchor mass range must lie strictly above the filler mass range".into());
        }
        if self.layers == 0 || self.heads == 0 || self.image_patches == 0 {
            return fail("layers, heads and image_patches must be positive".into());
        }
        Ok(())
    }
}

/// Filler word `i` is drawn with weight `1 / (i + 1)^FILLER_ZIPF`.
const FILLER_ZIPF: f64 = 2.0;

pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<ReasoningTrace>> {
    spec.check()?;
    let vocab = Vocabulary::standard(spec.vocab_size);
    let fillers = vocab.ids_of(WordClass::Filler);
    let anchor_ids: Vec<u32> = [WordClass::Color, WordClass::Shape, WordClass::Object]
        .into_iter()
        .flat_map(|c| vocab.ids_of(c))
        .collect();
    let key_ids = vocab.ids_of(WordClass::Key);
    let question_ids = vocab.ids_of(WordClass::Question);
    let filler_dist =
        WeightedIndex::new((0..fillers.len()).map(|i| ((i + 1) as f64).powf(-FILLER_ZIPF))).expect("positive weights");

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t_len = spec.trace_len;
    let n_anchor = spec.anchors_per_trace();
    let n_key = spec.keys_per_trace();
    let mut out = Vec::with_capacity(spec.n_traces);

    for i in 0..spec.n_traces {
        let mut slots: Vec<usize> = (0..t_len).collect();
        slots.shuffle(&mut rng);
        let mut anchors: Vec<usize> = slots[..n_anchor].to_vec();
        let mut keys: Vec<usize> = slots[n_anchor..n_anchor + n_key].to_vec();
        anchors.sort_unstable();
        keys.sort_unstable();

        let mut tokens = Vec::with_capacity(t_len);
        let mut mass = vec![0.0; spec.layers * spec.heads * t_len];
        let mut attributes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut answer = Vec::new();
        let mut depicted = Vec::new();
        for t in 0..t_len {
            let (id, surprisal) = if anchors.binary_search(&t).is_ok() {
                (*anchor_ids.choose(&mut rng).expect("anchor words"), spec.anchor_surprisal.sample(&mut rng))
            } else if keys.binary_search(&t).is_ok() {
                (*key_ids.choose(&mut rng).expect("key words"), spec.key_surprisal.sample(&mut rng))
            } else {
                (fillers[filler_dist.sample(&mut rng)], spec.filler_surprisal.sample(&mut rng))
            };
            let class = vocab.class_of_id(id);
            let is_anchor = class.is_anchor();
            for l in 0..spec.layers {
                let salient_head = (t + l) % spec.heads;
                for h in 0..spec.heads {
                    let range = if is_anchor && h == salient_head { spec.anchor_mass } else { spec.filler_mass };
                    mass[(l * spec.heads + h) * t_len + t] = range.sample(&mut rng);
                }
            }
            if let Some(cat) = class.category() {
                attributes.entry(cat.to_string()).or_default().push(t);
                attributes.entry("anchor".to_string()).or_default().push(t);
            }
            if class == WordClass::Key {
                attributes.entry("key".to_string()).or_default().push(t);
            }
            if is_anchor {
                depicted.push(vocab.word(id).to_string());
            }
            if is_anchor || class == WordClass::Key {
                answer.push(vocab.word(id).to_string());
            }
            tokens.push(TokenRecord::new(vocab.word(id), id, 0.0 - surprisal));
        }

        let question: Vec<&str> = (0..3).map(|_| vocab.word(*question_ids.choose(&mut rng).expect("question words"))).collect();
        let answer_gt = answer.join(" ");
        let answer_pred = if rng.gen::<f64>() < spec.error_rate {
            let mut wrong = answer.clone();
            wrong[0] = if wrong[0] == "two" { "three".into() } else { "two".into() };
            wrong.join(" ")
        } else {
            answer_gt.clone()
        };
        let trace = ReasoningTrace {
            trace_id: format!("s{}-{i:05}", spec.seed),
            question: question.join(" "),
            image_id: format!("synth-{}-{i}{IMAGE_CONTENT_SEP}{}", spec.seed, depicted.join("+")),
            image_key_indices: (0..spec.image_patches).collect(),
            tokens,
            attention: AttentionLayout::VisualMass(VisualMass::new(spec.layers, spec.heads, t_len, mass)?),
            answer_gt,
            answer_pred,
            attributes,
        };
        debug_assert!(validate_trace(&trace).is_empty());
        out.push(trace);
    }
    Ok(out)
}
