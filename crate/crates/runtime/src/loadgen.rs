//! Closed-loop clients over TCP.
//!
//! Each client runs on its own thread with its own connections. Requests
//! are signed before the clock starts, so client-side signing never
//! competes with the replicas during the measured window. A client stops
//! at the end of the window or when its presigned pool runs out.

use std::collections::HashMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, RecvTimeoutError};
use thiserror::Error;

use pbft_core::client::{ClientAction, ClientConfig, ClientError, ClientSession, Target};
use pbft_core::crypto::{CryptoMode, KeyStore};
use pbft_core::message::SignedRequest;
use pbft_core::wire::{decode, encode, NodeId};

use crate::pipeline::Egress;
use crate::tcp::{Deployment, TcpConfig, TcpFabric};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("client {client} reached {reached} replicas, needs {needed}")]
    Unreachable {
        client: NodeId,
        reached: u64,
        needed: u64,
    },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("client thread panicked")]
    Panicked,
}

#[derive(Clone, Debug)]
pub struct LoadConfig {
    pub mode: CryptoMode,
    pub outstanding: usize,
    pub value_size: usize,
    pub warmup: Duration,
    pub duration: Duration,
    /// Requests presigned per client.
    pub pool: usize,
    pub request_timeout: Duration,
    pub max_retransmits: u32,
    pub connect_timeout: Duration,
}

impl LoadConfig {
    pub fn new(mode: CryptoMode) -> Self {
        LoadConfig {
            mode,
            outstanding: 1,
            value_size: 512,
            warmup: Duration::from_secs(10),
            duration: Duration::from_secs(30),
            pool: 20_000,
            request_timeout: Duration::from_secs(1),
            max_retransmits: 8,
            connect_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ClientStats {
    pub id: NodeId,
    /// Completions inside the measured window.
    pub completed: u64,
    pub completed_total: u64,
    pub failed: u64,
    pub latencies_us: Vec<u64>,
    /// Measured window actually covered by this client.
    pub window: Duration,
    pub pool_exhausted: bool,
    pub rejected_replies: u64,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub clients: Vec<ClientStats>,
}

impl LoadReport {
    pub fn completed(&self) -> u64 {
        self.clients.iter().map(|c| c.completed).sum()
    }

    pub fn failed(&self) -> u64 {
        self.clients.iter().map(|c| c.failed).sum()
    }

    /// Longest window among the clients.
    pub fn window(&self) -> Duration {
        self.clients
            .iter()
            .map(|c| c.window)
            .max()
            .unwrap_or_default()
    }

    /// Requests per second over the measured window.
    pub fn throughput(&self) -> f64 {
        let w = self.window().as_secs_f64();
        if w == 0.0 {
            0.0
        } else {
            self.completed() as f64 / w
        }
    }

    pub fn latencies_us(&self) -> Vec<u64> {
        let mut all: Vec<u64> = self
            .clients
            .iter()
            .flat_map(|c| c.latencies_us.iter().copied())
            .collect();
        all.sort_unstable();
        all
    }

    pub fn pool_exhausted(&self) -> bool {
        self.clients.iter().any(|c| c.pool_exhausted)
    }
}

/// Runs one closed-loop client per key store and waits for all of them.
pub fn run_load(
    cfg: &LoadConfig,
    deployment: &Deployment,
    clients: Vec<KeyStore>,
) -> Result<LoadReport, LoadError> {
    let handles: Vec<_> = clients
        .into_iter()
        .map(|keys| {
            let (cfg, deployment) = (cfg.clone(), deployment.clone());
            thread::Builder::new()
                .name(format!("client-{}", keys.id()))
                .spawn(move || run_client(&cfg, &deployment, keys))
        })
        .collect::<Result<_, _>>()?;
    let mut report = LoadReport::default();
    for h in handles {
        report
            .clients
            .push(h.join().map_err(|_| LoadError::Panicked)??);
    }
    Ok(report)
}

pub fn run_client(
    cfg: &LoadConfig,
    deployment: &Deployment,
    keys: KeyStore,
) -> Result<ClientStats, LoadError> {
    let n = deployment.n();
    let id = keys.id();
    let mut ccfg = ClientConfig::new(n, cfg.mode);
    ccfg.request_timeout = cfg.request_timeout;
    ccfg.max_retransmits = cfg.max_retransmits;
    let needed = ccfg.reply_quorum() as u64;
    let mut session = ClientSession::new(ccfg, keys);
    let mut pool: Vec<SignedRequest> = (0..cfg.pool)
        .map(|i| {
            let mut payload = (i as u64).to_le_bytes().to_vec();
            payload.resize(cfg.value_size.max(1), 0);
            session.prepare(payload)
        })
        .collect::<Result<_, _>>()?;
    pool.reverse();

    let fabric = TcpFabric::bind(id, deployment.clone(), TcpConfig::default())?;
    let (tx, rx) = unbounded::<(NodeId, Vec<u8>)>();
    fabric.serve(Arc::new(tx));
    fabric.connect_all();
    let t0 = Instant::now();
    while fabric
        .stats()
        .connects
        .load(std::sync::atomic::Ordering::Relaxed)
        < needed
    {
        if t0.elapsed() > cfg.connect_timeout {
            let reached = fabric
                .stats()
                .connects
                .load(std::sync::atomic::Ordering::Relaxed);
            fabric.shutdown();
            return Err(LoadError::Unreachable {
                client: id,
                reached,
                needed,
            });
        }
        thread::sleep(Duration::from_millis(10));
    }

    let start = Instant::now();
    let warm_end = start + cfg.warmup;
    let end = warm_end + cfg.duration;
    let mut stats = ClientStats {
        id,
        ..Default::default()
    };
    let mut timers: HashMap<u64, Instant> = HashMap::new();
    let mut last = start;
    let apply = |actions: Vec<ClientAction>,
                 stats: &mut ClientStats,
                 timers: &mut HashMap<u64, Instant>,
                 last: &mut Instant| {
        let now = Instant::now();
        for a in actions {
            match a {
                ClientAction::Send { to, envelope } => {
                    let Ok(frame) = encode(&envelope) else {
                        continue;
                    };
                    match to {
                        Target::Replica(r) => fabric.send(r, frame),
                        Target::AllReplicas => {
                            for r in 0..n {
                                fabric.send(r, frame.clone());
                            }
                        }
                    }
                }
                ClientAction::SetTimer { request_id, after } => {
                    timers.insert(request_id, now + after);
                }
                ClientAction::Complete(c) => {
                    timers.remove(&c.request_id);
                    stats.completed_total += 1;
                    if now >= warm_end && now <= end {
                        stats.completed += 1;
                        stats.latencies_us.push(c.latency.as_micros() as u64);
                        *last = now;
                    }
                }
                ClientAction::Failed(request_id) => {
                    timers.remove(&request_id);
                    stats.failed += 1;
                }
            }
        }
    };

    loop {
        let now = Instant::now();
        if now >= end {
            break;
        }
        while session.outstanding() < cfg.outstanding {
            let Some(sr) = pool.pop() else { break };
            let actions = session.submit_prepared(sr, start.elapsed());
            apply(actions, &mut stats, &mut timers, &mut last);
        }
        if pool.is_empty() && session.outstanding() == 0 {
            stats.pool_exhausted = true;
            break;
        }
        let deadline = timers.values().min().copied().unwrap_or(end).min(end);
        match rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
            Ok((_, frame)) => {
                if let Ok(env) = decode(&frame) {
                    let actions = session.on_reply(&env, start.elapsed());
                    apply(actions, &mut stats, &mut timers, &mut last);
                }
            }
            Err(RecvTimeoutError::Timeout) => {
                let now = Instant::now();
                let due: Vec<u64> = timers
                    .iter()
                    .filter(|(_, at)| **at <= now)
                    .map(|(id, _)| *id)
                    .collect();
                for rid in due {
                    timers.remove(&rid);
                    let actions = session.on_timeout(rid);
                    apply(actions, &mut stats, &mut timers, &mut last);
                }
            }
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    // An exhausted pool ends the window at the last completion.
    stats.window = if stats.pool_exhausted {
        last.saturating_duration_since(warm_end)
    } else {
        end.saturating_duration_since(warm_end)
    };
    stats.rejected_replies = session.rejected_replies();
    fabric.shutdown();
    Ok(stats)
}
