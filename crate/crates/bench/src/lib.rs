//! Criterion benchmarks for the d3desk kernels; see `benches/`.
