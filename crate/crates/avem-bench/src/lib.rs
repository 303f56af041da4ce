//! Shared fixtures for the criterion benchmarks live in `benches/`.
