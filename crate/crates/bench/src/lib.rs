//! Placeholder library target; the benchmarks live in `benches/runtime.rs`.
