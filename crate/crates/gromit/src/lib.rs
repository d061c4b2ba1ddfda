//! Gromit: a benchmarking harness for transaction fabrics.
//!
//! The harness deploys validator and client instances from a scenario file,
//! drives a synthetic asset-transfer workload against the system under test,
//! measures end-to-end transaction throughput and latency, injects
//! geo-distributed network delays, and samples per-instance resource usage.
//! A built-in reference fabric with analytically predictable round-based
//! settlement is used to validate the whole measurement pipeline.

pub mod adapter;
pub mod analysis;
pub mod cli;
pub mod model;
pub mod netshape;
pub mod orchestrator;
pub mod reffabric;
pub mod runtime;
pub mod scenario;
pub mod telemetry;
pub mod workload;
