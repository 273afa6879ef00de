//! Benchmarks live in `benches/`; run them with `cargo bench -p cgfl-bench`.
