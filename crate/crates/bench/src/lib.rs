//! Criterion benchmarks for the model live in `benches/`.
