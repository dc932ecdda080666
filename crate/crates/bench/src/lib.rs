//! Criterion benchmarks for the sampler hot paths; see `benches/`.
