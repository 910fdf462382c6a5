//! Criterion benchmarks of the per-cycle control paths; see `benches/`.
