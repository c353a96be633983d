//! Criterion benchmarks for the SAHC network live in `benches/`.
