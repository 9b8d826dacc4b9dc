//! Criterion benchmarks for the lesionkit kernels; see `benches/`.
