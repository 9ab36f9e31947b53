//! Criterion benchmarks for the rectification loop and the meta-training step.
//! Run with `cargo bench -p fspll-bench`.
