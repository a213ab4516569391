//! Criterion benchmarks for the hot paths of `prefdyn`; see `benches/`.
