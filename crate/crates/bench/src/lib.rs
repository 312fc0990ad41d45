//! Criterion benchmarks for `sconv-core`; see `benches/`.
