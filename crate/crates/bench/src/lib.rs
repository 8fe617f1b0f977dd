//! Criterion benchmarks for the sampler, training step and evaluator live in `benches/`.
