//! A replica process: TCP fabric, pipeline and replica wired together.

use std::sync::Arc;

use thiserror::Error;

use pbft_core::crypto::KeyStore;
use pbft_core::replica::{ConfigError, Replica, ReplicaConfig};
use pbft_core::wire::NodeId;

use crate::metrics::{Counters, StageMetrics};
use crate::pipeline::{Pipeline, PipelineConfig, PipelineError, PipelineIo, ReplicaStatus};
use crate::tcp::{Deployment, TcpConfig, TcpFabric, TcpStats};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("node {id} is not in the deployment")]
    NotDeployed { id: NodeId },
    #[error("deployment lists {deployed} nodes but the replica expects {n}")]
    GroupSize { deployed: u16, n: u16 },
    #[error(transparent)]
    Replica(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("cannot listen: {0}")]
    Bind(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub replica: ReplicaConfig,
    pub pipeline: PipelineConfig,
    pub tcp: TcpConfig,
}

impl NodeConfig {
    pub fn new(replica: ReplicaConfig) -> Self {
        NodeConfig {
            pipeline: PipelineConfig::for_mode(replica.mode),
            replica,
            tcp: TcpConfig::default(),
        }
    }
}

pub struct Node {
    pipeline: Pipeline,
    fabric: Arc<TcpFabric>,
}

impl Node {
    pub fn start(
        cfg: NodeConfig,
        deployment: Deployment,
        keys: KeyStore,
    ) -> Result<Self, NodeError> {
        Self::start_with(cfg, deployment, keys, PipelineIo::default())
    }

    pub fn start_with(
        cfg: NodeConfig,
        deployment: Deployment,
        keys: KeyStore,
        io: PipelineIo,
    ) -> Result<Self, NodeError> {
        let id = cfg.replica.id;
        if deployment.addr(id).is_none() {
            return Err(NodeError::NotDeployed { id });
        }
        if deployment.n() != cfg.replica.n {
            return Err(NodeError::GroupSize {
                deployed: deployment.n(),
                n: cfg.replica.n,
            });
        }
        let replica = Replica::new(cfg.replica)?;
        let fabric = TcpFabric::bind(id, deployment, cfg.tcp)?;
        let pipeline = Pipeline::start(cfg.pipeline, replica, keys, fabric.clone(), io)?;
        fabric.serve(Arc::new(pipeline.ingress()));
        fabric.connect_all();
        Ok(Node { pipeline, fabric })
    }

    pub fn id(&self) -> NodeId {
        self.pipeline.id()
    }

    pub fn status(&self) -> ReplicaStatus {
        self.pipeline.status()
    }

    pub fn metrics(&self) -> Arc<StageMetrics> {
        self.pipeline.metrics()
    }

    pub fn counters(&self) -> Arc<Counters> {
        self.pipeline.counters()
    }

    pub fn transport(&self) -> &TcpStats {
        self.fabric.stats()
    }

    pub fn shutdown(self) {
        self.fabric.shutdown();
        self.pipeline.shutdown();
    }
}
