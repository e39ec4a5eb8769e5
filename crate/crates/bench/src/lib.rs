//! Criterion benchmarks for the captioning pipeline live in `benches/`.
