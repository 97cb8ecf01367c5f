//! Benchmarks for the engine live under `benches/`.
