//! Criterion benchmarks for `lmmderiv`; see `benches/`.
