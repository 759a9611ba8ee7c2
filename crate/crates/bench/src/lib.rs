//! Criterion benchmarks for the embedkit kernels; see `benches/`.
