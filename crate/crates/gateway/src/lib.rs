//! Gateway in front of the capability-based access-control stack: the web
//! service, the administrator CLI and the benchmark harness.

pub mod bench;
pub mod cli;
pub mod client;
pub mod config;
pub mod http;
pub mod keystore;
pub mod models;
pub mod ops;

pub use bench::{run_benchmark, ExperimentConfig, ExperimentReport};
pub use models::Model;
