//! Threaded runtime for PBFT* replicas: the staged processing pipeline,
//! its per-stage metrics, a TCP transport, and closed-loop TCP clients.

pub mod loadgen;
pub mod metrics;
pub mod node;
pub mod pipeline;
pub mod reorder;
pub mod tcp;

pub use loadgen::{run_load, LoadConfig, LoadError, LoadReport};
pub use metrics::{Counters, Stage, StageCost, StageMetrics};
pub use node::{Node, NodeConfig, NodeError};
pub use pipeline::{
    Egress, Ingress, Pipeline, PipelineConfig, PipelineError, PipelineIo, ReplicaStatus,
};
pub use tcp::{Deployment, DeploymentError, TcpConfig, TcpFabric};
