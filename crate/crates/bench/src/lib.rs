//! Criterion benchmarks for the boosting, transfer-fit and selection paths.
//! Run with `cargo bench -p intervene-bench`.
