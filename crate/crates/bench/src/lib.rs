//! Criterion benchmarks for the xbl kernels and pipeline pieces; see `benches/`.
