//! Criterion benchmarks for the training step, embedding and evaluation live in `benches/`.
