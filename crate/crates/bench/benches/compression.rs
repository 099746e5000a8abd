use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use vskip_core::gating::mask_from_scores;
use vskip_core::metrics::levenshtein;
use vskip_core::pipeline::{synth_corpus, SynthSpec};
use vskip_core::scoring::score_trace;
use vskip_core::toy::{forward, image_features, ToyConfig, ToyReasonerParams};
use vskip_core::{GateConfig, ScoringConfig, Strategy};

fn scoring(c: &mut Criterion) {
    let mut group = c.benchmark_group("score_trace");
    for len in [20, 100, 400] {
        let traces = synth_corpus(&SynthSpec { n_traces: 8, trace_len: len, seed: 1, ..SynthSpec::default() }).unwrap();
        let cfg = ScoringConfig::default();
        group.bench_with_input(BenchmarkId::from_parameter(len), &traces, |b, traces| {
            b.iter(|| traces.iter().map(|t| score_trace(black_box(t), &cfg).unwrap().s_vis.len()).sum::<usize>())
        });
    }
    group.finish();
}

fn gating(c: &mut Criterion) {
    let traces = synth_corpus(&SynthSpec { n_traces: 1, trace_len: 1000, seed: 2, ..SynthSpec::default() }).unwrap();
    let scored = score_trace(&traces[0], &ScoringConfig::default()).unwrap();
    let mut group = c.benchmark_group("gate_1000");
    for strategy in Strategy::ALL {
        let cfg = GateConfig::new(0.5, strategy).unwrap();
        group.bench_function(strategy.name(), |b| {
            b.iter(|| mask_from_scores(black_box(&scored.s_text), black_box(&scored.s_vis), "bench", &cfg).unwrap())
        });
    }
    group.finish();
}

fn edit_distance(c: &mut Criterion) {
    let a = "red circle cat seven blue square ".repeat(4);
    let b = "red square cat eight blue circle ".repeat(4);
    c.bench_function("levenshtein_132", |bench| bench.iter(|| levenshtein(black_box(&a), black_box(&b))));
}

fn toy_forward(c: &mut Criterion) {
    let params = ToyReasonerParams::init(ToyConfig::default()).unwrap();
    let img = image_features("bench", 4, 32);
    let mut group = c.benchmark_group("toy_forward");
    for len in [8, 32, 59] {
        let prefix: Vec<u32> = (0..len).map(|i| (i * 7 % 64) as u32).collect();
        group.bench_with_input(BenchmarkId::from_parameter(len), &prefix, |b, prefix| {
            b.iter(|| forward(&params, None, &img, black_box(prefix)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, scoring, gating, edit_distance, toy_forward);
criterion_main!(benches);
