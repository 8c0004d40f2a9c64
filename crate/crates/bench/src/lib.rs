//! Criterion benchmarks for the convolution, attention and model kernels.
//! Run with `cargo bench -p agsenet-bench`.
