pub mod cluster;
pub mod config;
pub mod error;
pub mod grpo;
pub mod kvcache;
pub mod metrics;
pub mod orchestrator;
pub mod paradigms;
pub mod report;
pub mod simengine;
pub mod sweep;
pub mod transfer_queue;
pub mod workload;

pub use error::{Result, SimError};
