//! Criterion benchmarks for the ocdd kernels and model; see `benches/`.
