//! Benchmark harness: configuration, in-process clusters, run reports and
//! the pieces behind the `pbftstar` command line.

pub mod compare;
pub mod config;
pub mod harness;
pub mod keygen;
pub mod report;
pub mod scenarios;

use thiserror::Error;

pub use config::BenchConfig;
pub use report::RunReport;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Refused(String),
    #[error("node failed to start: {0}")]
    Node(String),
    #[error(transparent)]
    Load(#[from] pbft_runtime::LoadError),
    #[error(transparent)]
    Crypto(#[from] pbft_core::crypto::CryptoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
