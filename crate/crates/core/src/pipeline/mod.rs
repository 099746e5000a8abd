//! The two-phase pipeline: prune teacher traces with the dual-path gate, then
//! distill the compressed chains into a low-rank adapter; plus synthetic
//! planted-anchor corpora and evaluation sweeps over them.

mod eval;
mod phase;
mod synth;

pub use eval::{
    evaluate, evaluate_generated, pope_probes, proxy_answer, sweep_csv, SweepPoint, SweepRow, SWEEP_CSV_HEADER,
};
pub use phase::{
    audit_record, filter_correct, load_dataset, run_phase1, run_phase2, save_dataset, to_examples, write_curve,
    DatasetRecord, FilterMode, PipelineConfig,
};
pub use synth::{synth_corpus, Range, SynthSpec};
