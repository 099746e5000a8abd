//! Criterion benchmarks for the compression toolkit live in `benches/`.
