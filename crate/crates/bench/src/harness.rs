//! In-process clusters: every replica in this process, talking over
//! loopback TCP exactly as separate processes would.

use std::thread;
use std::time::{Duration, Instant};

use pbft_core::crypto::Keyring;
use pbft_runtime::loadgen::{run_load, LoadReport};
use pbft_runtime::{Counters, Deployment, Node, NodeConfig, TcpConfig};

use crate::config::BenchConfig;
use crate::report::{goodput_gbps, LatencySummary, RunReport};
use crate::BenchError;

pub struct LocalCluster {
    pub nodes: Vec<Node>,
    pub deployment: Deployment,
}

impl LocalCluster {
    pub fn start(
        cfg: &BenchConfig,
        ring: &Keyring,
        deployment: Deployment,
    ) -> Result<Self, BenchError> {
        let nodes = (0..cfg.n)
            .map(|id| {
                let nc = NodeConfig {
                    replica: cfg.replica(id),
                    pipeline: cfg.pipeline(),
                    tcp: TcpConfig::default(),
                };
                Node::start(nc, deployment.clone(), ring.keystore(id)?)
                    .map_err(|e| BenchError::Node(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Ok(LocalCluster { nodes, deployment })
    }

    /// Waits until no replica has executed anything new for `quiet`.
    pub fn settle(&self, quiet: Duration, limit: Duration) {
        let end = Instant::now() + limit;
        let mut last: Vec<u64> = Vec::new();
        while Instant::now() < end {
            let now: Vec<u64> = self
                .nodes
                .iter()
                .map(|n| n.status().last_executed)
                .collect();
            if now == last {
                return;
            }
            last = now;
            thread::sleep(quiet);
        }
    }

    pub fn shutdown(self) {
        for n in self.nodes {
            n.shutdown();
        }
    }
}

pub fn keyring(cfg: &BenchConfig) -> Result<Keyring, BenchError> {
    Ok(Keyring::generate(
        cfg.signature,
        cfg.n,
        &cfg.client_ids(),
        cfg.key_seed,
    )?)
}

/// Starts `cfg.n` replicas on free loopback ports, drives them with
/// `cfg.clients` closed-loop clients and reports on the view-0 leader.
pub fn run_local(cfg: &BenchConfig) -> Result<RunReport, BenchError> {
    cfg.validate()?;
    let ring = keyring(cfg)?;
    let cluster = LocalCluster::start(cfg, &ring, Deployment::localhost_free(cfg.n)?)?;
    let clients = cfg
        .client_ids()
        .into_iter()
        .map(|c| ring.keystore(c))
        .collect::<Result<Vec<_>, _>>()?;
    let load = run_load(&cfg.load_config(), &cluster.deployment, clients);
    cluster.settle(Duration::from_millis(200), Duration::from_secs(5));
    let report = load.map(|l| report(cfg, &l, &cluster));
    cluster.shutdown();
    Ok(report?)
}

pub fn report(cfg: &BenchConfig, load: &LoadReport, cluster: &LocalCluster) -> RunReport {
    let leader = &cluster.nodes[0];
    let lat = load.latencies_us();
    let throughput = load.throughput();
    RunReport {
        mode: cfg.mode,
        n: cfg.n,
        value_size: cfg.value_size,
        batch_size: cfg.batch_size,
        clients: cfg.clients,
        outstanding: cfg.outstanding,
        window_s: load.window().as_secs_f64(),
        completed: load.completed(),
        throughput,
        goodput_gbps: goodput_gbps(throughput, cfg.value_size),
        latency: LatencySummary::from_sorted(&lat),
        latencies_us: lat,
        failed: load.failed(),
        rejected: cluster
            .nodes
            .iter()
            .map(|n| Counters::load(&n.counters().rejected))
            .sum(),
        view_changes: cluster
            .nodes
            .iter()
            .map(|n| n.status().view)
            .max()
            .unwrap_or(0),
        pre_prepares: Counters::load(&leader.counters().pre_prepares),
        committed_requests: Counters::load(&leader.counters().committed_requests),
        pool_exhausted: load.pool_exhausted(),
        stages_csv: leader.metrics().to_csv(),
    }
}
