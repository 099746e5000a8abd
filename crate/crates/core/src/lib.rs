//! Dual-path token compression for multimodal chain-of-thought traces.
//!
//! Every generated reasoning token gets two scores: its linguistic surprisal
//! and a visual anchoring score derived from how much attention it pays to
//! the image patches. A union gate keeps a token when it clears a per-sequence
//! percentile threshold on either path, so tokens that are predictable as text
//! but grounded in the image survive compression.
//!
//! Modules:
//! - [`trace`]: trace data model, validation and JSONL I/O.
//! - [`scoring`]: surprisal and visual anchoring scores.
//! - [`gating`]: percentile thresholds, the union gate and baseline strategies.
//! - [`metrics`]: accuracy, ANLS, ActRatio, VARR and POPE statistics.
//! - [`toy`]: a tiny prefix-fusion transformer with low-rank adapters,
//!   analytic gradients and information-bottleneck diagnostics.
//! - [`pipeline`]: synthetic planted-anchor corpora, the two-phase
//!   prune-then-distill pipeline and evaluation sweeps.

pub mod error;
pub mod gating;
pub mod metrics;
pub mod pipeline;
pub mod scoring;
pub mod toy;
pub mod trace;
pub mod vocab;

pub use error::{Result, VskipError};
pub use gating::{GateConfig, Mask, Strategy};
pub use metrics::EvalReport;
pub use scoring::{ScoredTrace, ScoringConfig};
pub use trace::{AttentionLayout, AttentionTensor, CompressedChain, ReasoningTrace, TokenRecord};
