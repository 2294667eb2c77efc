//! Logless one-phase commit for partitioned, replicated key-value stores,
//! with two-phase-commit baselines and a deterministic simulator to run
//! them in.

pub mod audit;
pub mod baselines;
pub mod bench;
pub mod client;
pub mod experiment;
pub mod metrics;
pub mod participant;
pub mod serial;
pub mod sim;
pub mod store;
pub mod topology;
pub mod trace;
pub mod types;
pub mod workload;
