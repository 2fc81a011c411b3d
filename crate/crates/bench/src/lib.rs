//! Criterion benchmarks for keycalib live in `benches/`.
