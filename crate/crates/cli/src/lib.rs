//! Operator tooling: the `oope` command and the benchmark harness.

pub mod app;
pub mod bench;
