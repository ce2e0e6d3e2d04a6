//! Scenario files: a simulation config plus the assertions to check.
//!
//! Scenarios are TOML. Every section except the top-level `n` has
//! defaults:
//!
//! ```toml
//! name = "leader_crash"
//! seed = 7
//! n = 4
//! mode = "mac_inter_node"      # pk_only | mac_inter_node | domain_optimized
//! signature = "ed25519"        # ed25519 | rsa2048
//! until_ms = 60000             # omit to run until quiescent
//!
//! [network]
//! latency_min_us = 200
//! latency_max_us = 1500
//! drop = 0.0
//! [[network.partition]]
//! from_ms = 10
//! until_ms = 200
//! nodes = [3]
//!
//! [replica]
//! batch_size = 1
//! checkpoint_interval = 500
//! log_capacity = 10000
//! view_change_timeout_ms = 50
//!
//! [workload]
//! clients = 1
//! requests = 100               # per client
//! outstanding = 1
//! value_size = 512
//! timeout_ms = 100
//!
//! [[fault]]
//! node = 0
//! kind = "crash"               # crash | mute | equivocate
//! at_ms = 0
//!
//! [expect]
//! committed_requests = 100     # at every live correct replica
//! view_changes = 1
//! max_view = 1
//! ```
//!
//! Agreement, validity and view-change safety are always checked.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use super::{Fault, Outcome, Partition, SimConfig, SimError, SimReport, Simulation, Until};
use crate::crypto::{CryptoMode, SignatureAlgorithm};
use crate::wire::{NodeId, View};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub n: u16,
    #[serde(default = "default_mode")]
    pub mode: CryptoMode,
    #[serde(default = "default_signature")]
    pub signature: SignatureAlgorithm,
    pub until_ms: Option<u64>,
    pub max_events: Option<u64>,
    #[serde(default)]
    pub network: Network,
    #[serde(default)]
    pub replica: ReplicaSection,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default, rename = "fault")]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub expect: Expectations,
}

fn default_mode() -> CryptoMode {
    CryptoMode::MacInterNode
}

fn default_signature() -> SignatureAlgorithm {
    SignatureAlgorithm::Ed25519
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Network {
    pub latency_min_us: u64,
    pub latency_max_us: u64,
    pub drop: f64,
    #[serde(rename = "partition")]
    pub partitions: Vec<PartitionSpec>,
}

impl Default for Network {
    fn default() -> Self {
        Network {
            latency_min_us: 100,
            latency_max_us: 1_000,
            drop: 0.0,
            partitions: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub from_ms: u64,
    pub until_ms: u64,
    pub nodes: BTreeSet<NodeId>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplicaSection {
    pub batch_size: usize,
    pub batch_timeout_us: u64,
    pub checkpoint_interval: u64,
    pub log_capacity: u64,
    pub view_change_timeout_ms: u64,
    pub attach_batches: bool,
}

impl Default for ReplicaSection {
    fn default() -> Self {
        ReplicaSection {
            batch_size: 1,
            batch_timeout_us: 2_000,
            checkpoint_interval: 500,
            log_capacity: 10_000,
            view_change_timeout_ms: 50,
            attach_batches: true,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    pub clients: usize,
    pub requests: u64,
    pub outstanding: usize,
    pub value_size: usize,
    pub timeout_ms: u64,
    pub max_retransmits: u32,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            clients: 1,
            requests: 10,
            outstanding: 1,
            value_size: 64,
            timeout_ms: 100,
            max_retransmits: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Crash,
    Mute,
    Equivocate,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub node: NodeId,
    pub kind: FaultKind,
    #[serde(default)]
    pub at_ms: u64,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    /// Requests executed at every live correct replica.
    pub committed_requests: Option<u64>,
    /// Requests completed at clients.
    pub completed: Option<u64>,
    pub view_changes: Option<usize>,
    pub min_view: Option<View>,
    pub max_view: Option<View>,
    /// Live correct replicas executed the same request sequence.
    #[serde(default)]
    pub identical_logs: bool,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.config()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn config(&self) -> Result<SimConfig, ScenarioError> {
        let mut c = SimConfig::new(self.n, self.mode, self.seed);
        c.signature = self.signature;
        c.latency_min_us = self.network.latency_min_us;
        c.latency_max_us = self.network.latency_max_us;
        c.drop_probability = self.network.drop;
        c.partitions = self
            .network
            .partitions
            .iter()
            .map(|p| Partition {
                from_us: p.from_ms * 1_000,
                until_us: p.until_ms * 1_000,
                nodes: p.nodes.clone(),
            })
            .collect();
        let mut faults = BTreeMap::new();
        for f in &self.faults {
            let fault = match f.kind {
                FaultKind::Crash => Fault::CrashAt(f.at_ms * 1_000),
                FaultKind::Mute => Fault::Mute,
                FaultKind::Equivocate => Fault::Equivocate,
            };
            if faults.insert(f.node, fault).is_some() {
                return Err(ScenarioError::Invalid(format!(
                    "node {} has two faults",
                    f.node
                )));
            }
        }
        c.faults = faults;
        let r = &self.replica;
        c.batch_size = r.batch_size;
        c.batch_timeout_us = r.batch_timeout_us;
        c.checkpoint_interval = r.checkpoint_interval;
        c.log_capacity = r.log_capacity;
        c.view_change_timeout_us = r.view_change_timeout_ms * 1_000;
        c.attach_batches = r.attach_batches;
        let w = &self.workload;
        c.clients = w.clients;
        c.requests_per_client = w.requests;
        c.outstanding = w.outstanding;
        c.value_size = w.value_size;
        c.client_timeout_us = w.timeout_ms * 1_000;
        c.max_retransmits = w.max_retransmits;
        if let Some(m) = self.max_events {
            c.max_events = m;
        }
        c.validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(c)
    }

    pub fn until(&self) -> Until {
        match self.until_ms {
            Some(ms) => Until::Time(Duration::from_millis(ms)),
            None => Until::Quiescent,
        }
    }

    /// Runs the scenario with tracing on and returns the report together
    /// with every failed expectation.
    pub fn run(&self) -> Result<(SimReport, Vec<String>), SimError> {
        let mut cfg = self.config().map_err(|e| SimError::Config(e.to_string()))?;
        cfg.trace = true;
        let report = Simulation::new(cfg)?.run(self.until());
        let failures = self.check(&report);
        Ok((report, failures))
    }

    pub fn check(&self, r: &SimReport) -> Vec<String> {
        let mut failed: Vec<String> = r.violations.iter().map(|v| v.to_string()).collect();
        if r.outcome == Outcome::NonQuiescent {
            failed.push(format!("no quiescence after {} events", r.stats.events));
        }
        let e = &self.expect;
        if let Some(want) = e.committed_requests {
            for rep in r.live() {
                if rep.executed.len() as u64 != want {
                    failed.push(format!(
                        "replica {} executed {} requests, expected {want}",
                        rep.id,
                        rep.executed.len()
                    ));
                }
            }
        }
        if let Some(want) = e.completed {
            if r.stats.completed != want {
                failed.push(format!(
                    "clients completed {} requests, expected {want}",
                    r.stats.completed
                ));
            }
        }
        if let Some(want) = e.view_changes {
            if r.view_changes() != want {
                failed.push(format!(
                    "{} view changes (views {:?}), expected {want}",
                    r.view_changes(),
                    r.installed_views
                ));
            }
        }
        for rep in r.live() {
            if e.min_view.is_some_and(|v| rep.view < v) {
                failed.push(format!(
                    "replica {} ended in view {}, below the minimum",
                    rep.id, rep.view
                ));
            }
            if e.max_view.is_some_and(|v| rep.view > v) {
                failed.push(format!(
                    "replica {} ended in view {}, above the maximum",
                    rep.id, rep.view
                ));
            }
        }
        if e.identical_logs {
            let mut live = r.live();
            if let Some(first) = live.next() {
                for rep in live {
                    if rep.executed != first.executed {
                        failed.push(format!(
                            "replicas {} and {} executed different sequences",
                            first.id, rep.id
                        ));
                    }
                }
            }
        }
        failed
    }
}
