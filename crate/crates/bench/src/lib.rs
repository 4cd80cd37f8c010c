//! Benchmarks for the hot loops live in `benches/kernels.rs`:
//! one full-batch gradient step, a short DMFT integration and a tensor
//! quadrature moment. Run them with `cargo bench -p multipass-bench`.
