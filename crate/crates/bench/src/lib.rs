//! Benchmarks for the estimation engine live under `benches/`.
