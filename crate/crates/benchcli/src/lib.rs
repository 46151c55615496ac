//! Benchmark harness for the offload stack: seeded key-value and raw
//! block workloads, placement sweeps, admission-policy scaling, and
//! cache-pollution runs, all emitting one CSV row per configuration.

pub mod cache;
pub mod config;
pub mod experiments;
pub mod metrics;
pub mod workload;
