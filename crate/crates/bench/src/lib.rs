//! Benchmarks for the hot kernels of `sigmoe-core`; see `benches/kernels.rs`.
