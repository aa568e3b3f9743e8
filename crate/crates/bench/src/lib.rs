//! Criterion benchmarks for selectkit live under `benches/`.
