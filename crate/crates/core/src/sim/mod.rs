//! Deterministic discrete-event simulation of a replica group.
//!
//! Everything runs on one thread in virtual time (microseconds). Frames are
//! really encoded, sealed and verified; only the network is simulated.
//! Events are ordered by `(time, tiebreak)` and every random draw comes from
//! one seeded generator, so a configuration always produces the same trace.

mod observer;
mod scenario;

pub use observer::{Observer, Violation};
pub use scenario::{Expectations, Scenario, ScenarioError};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientAction, ClientConfig, ClientSession, Target};
use crate::crypto::{
    seal, verify_embedded_with, verify_incoming, BatchCache, CryptoError, CryptoMode, KeyStore,
    Keyring, SignatureAlgorithm, Verdict,
};
use crate::message::{Body, Message, PrePrepareBody, Request, RequestKey, SignedRequest};
use crate::replica::{
    ConfigError, Destination, Event, Inbound, Outbound, ProtocolOutput, Replica, ReplicaConfig,
    TimerCommand, TimerKind, TraceKind, TraceRecord,
};
use crate::wire::{decode_with, encode_with, Limits, MessageKind, NodeId, Seq, View, WireEnvelope};

/// Client ids are `CLIENT_BASE + index`.
pub const CLIENT_BASE: NodeId = 1000;
/// Client identity used by an equivocating leader for its conflicting batches.
pub const ADVERSARY: NodeId = 999;

pub fn client_id(index: usize) -> NodeId {
    CLIENT_BASE + index as NodeId
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Stops processing anything at this virtual time (microseconds).
    CrashAt(u64),
    /// Runs normally but every outbound message is swallowed.
    Mute,
    /// As primary, sends half the backups a conflicting PRE_PREPARE.
    Equivocate,
}

/// Nodes in `nodes` can talk only among themselves during `[from_us, until_us)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub from_us: u64,
    pub until_us: u64,
    pub nodes: BTreeSet<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    /// Seeds key generation. Kept apart from `seed` so sweeps reuse keys.
    pub key_seed: u64,
    pub n: u16,
    pub mode: CryptoMode,
    pub signature: SignatureAlgorithm,
    pub latency_min_us: u64,
    pub latency_max_us: u64,
    pub drop_probability: f64,
    pub partitions: Vec<Partition>,
    pub faults: BTreeMap<NodeId, Fault>,
    pub batch_size: usize,
    pub batch_timeout_us: u64,
    pub checkpoint_interval: u64,
    pub log_capacity: u64,
    pub view_change_timeout_us: u64,
    pub attach_batches: bool,
    pub clients: usize,
    pub requests_per_client: u64,
    pub outstanding: usize,
    pub value_size: usize,
    pub client_timeout_us: u64,
    pub max_retransmits: u32,
    pub max_events: u64,
    pub trace: bool,
}

impl SimConfig {
    pub fn new(n: u16, mode: CryptoMode, seed: u64) -> Self {
        SimConfig {
            seed,
            key_seed: 0,
            n,
            mode,
            signature: SignatureAlgorithm::Ed25519,
            latency_min_us: 100,
            latency_max_us: 1_000,
            drop_probability: 0.0,
            partitions: Vec::new(),
            faults: BTreeMap::new(),
            batch_size: 1,
            batch_timeout_us: 2_000,
            checkpoint_interval: 500,
            log_capacity: 10_000,
            view_change_timeout_us: 50_000,
            attach_batches: true,
            clients: 1,
            requests_per_client: 10,
            outstanding: 1,
            value_size: 64,
            client_timeout_us: 100_000,
            max_retransmits: 50,
            max_events: 5_000_000,
            trace: false,
        }
    }

    pub fn f(&self) -> u16 {
        self.n.saturating_sub(1) / 3
    }

    pub fn replica_config(&self, id: NodeId) -> ReplicaConfig {
        let mut c = ReplicaConfig::new(self.n, id, self.mode);
        c.batch_size = self.batch_size;
        c.batch_timeout = Duration::from_micros(self.batch_timeout_us);
        c.checkpoint_interval = self.checkpoint_interval;
        c.log_capacity = self.log_capacity;
        c.view_change_timeout = Duration::from_micros(self.view_change_timeout_us);
        c.attach_batches = self.attach_batches;
        c
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.latency_min_us > self.latency_max_us {
            return Err(SimError::Config(
                "latency_min_us above latency_max_us".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(SimError::Config("drop probability outside [0, 1]".into()));
        }
        if self.faults.keys().any(|&k| k >= self.n) {
            return Err(SimError::Config(
                "fault assigned to a node outside the group".into(),
            ));
        }
        if self.clients >= (CLIENT_BASE as usize..NodeId::MAX as usize).len() {
            return Err(SimError::Config("too many clients".into()));
        }
        ReplicaConfig::validate(&self.replica_config(0))?;
        Ok(())
    }

    /// Safety claims only hold when at most `f` nodes misbehave.
    pub fn within_fault_bound(&self) -> bool {
        self.faults.len() <= self.f() as usize
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Replica(#[from] ConfigError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("no quiescence after {events} events")]
    NonQuiescent { events: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Until {
    /// Stop once every client is done and no frame is in flight.
    Quiescent,
    Time(Duration),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Quiescent,
    Deadline,
    /// The event budget ran out first.
    NonQuiescent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceLine {
    pub t_us: u64,
    pub node: NodeId,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Deliver {
        from: NodeId,
        kind: &'static str,
        view: View,
        seq: Seq,
    },
    Drop {
        to: NodeId,
        kind: &'static str,
    },
    Reject {
        from: NodeId,
        kind: &'static str,
        reason: String,
    },
    Timer {
        timer: TimerKind,
    },
    Crash,
    Equivocate {
        view: View,
        seq: Seq,
    },
    Protocol(TraceRecord),
    Completed {
        request_id: u64,
        latency_us: u64,
    },
    Failed {
        request_id: u64,
    },
    Violation {
        detail: String,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SimStats {
    pub events: u64,
    pub frames_sent: u64,
    pub bytes_sent: u64,
    pub dropped: u64,
    pub rejected: u64,
    pub muted: u64,
    pub lost_to_crash: u64,
    pub pre_prepares: u64,
    pub equivocations: u64,
    pub submitted: u64,
    pub completed: u64,
    pub failed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReplicaSummary {
    pub id: NodeId,
    pub correct: bool,
    pub crashed: bool,
    pub view: View,
    pub last_executed: Seq,
    pub low_watermark: Seq,
    pub max_log_len: usize,
    pub watermark_advances: u64,
    pub lagging: bool,
    /// Executed requests in order, no-ops excluded.
    pub executed: Vec<RequestKey>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimReport {
    pub outcome: Outcome,
    pub end_us: u64,
    pub stats: SimStats,
    pub latencies_us: Vec<u64>,
    pub replicas: Vec<ReplicaSummary>,
    /// Views above 0 that some correct replica installed.
    pub installed_views: BTreeSet<View>,
    pub violations: Vec<Violation>,
    #[serde(skip)]
    pub trace: Vec<TraceLine>,
}

impl SimReport {
    pub fn is_safe(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn view_changes(&self) -> usize {
        self.installed_views.len()
    }

    /// Correct replicas that have not crashed.
    pub fn live(&self) -> impl Iterator<Item = &ReplicaSummary> {
        self.replicas.iter().filter(|r| r.correct && !r.crashed)
    }

    pub fn trace_ndjson(&self) -> String {
        let mut out = String::new();
        for line in &self.trace {
            out.push_str(&serde_json::to_string(line).expect("trace lines serialize"));
            out.push('\n');
        }
        out
    }
}

enum Action {
    Deliver {
        from: NodeId,
        to: NodeId,
        frame: Arc<Vec<u8>>,
    },
    ReplicaTimer {
        node: NodeId,
        timer: TimerKind,
        generation: u64,
    },
    ClientTimer {
        client: usize,
        request_id: u64,
    },
    ClientStart(usize),
    Crash(NodeId),
}

struct Node {
    replica: Replica,
    keys: KeyStore,
    cache: BatchCache,
    fault: Option<Fault>,
    crashed: bool,
    max_log_len: usize,
    watermark_advances: u64,
    last_low: Seq,
    executed: Vec<RequestKey>,
}

struct ClientDriver {
    session: ClientSession,
    remaining: u64,
}

type KeyringKey = (SignatureAlgorithm, u16, Vec<NodeId>, u64);

/// Key generation dominates short runs (RSA especially), so keyrings are
/// shared across simulations with the same membership.
fn shared_keyring(
    algorithm: SignatureAlgorithm,
    n: u16,
    clients: Vec<NodeId>,
    seed: u64,
) -> Result<Arc<Keyring>, CryptoError> {
    static CACHE: OnceLock<Mutex<HashMap<KeyringKey, Arc<Keyring>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (algorithm, n, clients, seed);
    if let Some(k) = cache.lock().unwrap().get(&key) {
        return Ok(k.clone());
    }
    let ring = Arc::new(Keyring::generate(algorithm, n, &key.2, seed)?);
    cache.lock().unwrap().insert(key, ring.clone());
    Ok(ring)
}

pub struct Simulation {
    cfg: SimConfig,
    limits: Limits,
    now: u64,
    tiebreak: u64,
    queue: BTreeMap<(u64, u64), Action>,
    in_flight: usize,
    rng: ChaCha8Rng,
    links: HashMap<(NodeId, NodeId), u64>,
    nodes: Vec<Node>,
    clients: Vec<ClientDriver>,
    adversary: Option<KeyStore>,
    adversary_next: u64,
    observer: Observer,
    stats: SimStats,
    latencies: Vec<u64>,
    installed: BTreeSet<View>,
    trace: Vec<TraceLine>,
}

fn us(d: Duration) -> u64 {
    d.as_micros().min(u64::MAX as u128) as u64
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let equivocates = cfg.faults.values().any(|f| *f == Fault::Equivocate);
        let mut ids: Vec<NodeId> = (0..cfg.clients).map(client_id).collect();
        if equivocates {
            ids.push(ADVERSARY);
        }
        let ring = shared_keyring(cfg.signature, cfg.n, ids, cfg.key_seed)?;
        let mut nodes = Vec::with_capacity(cfg.n as usize);
        for id in 0..cfg.n {
            nodes.push(Node {
                replica: Replica::new(cfg.replica_config(id))?,
                keys: ring.keystore(id)?,
                cache: BatchCache::new(4096),
                fault: cfg.faults.get(&id).copied(),
                crashed: false,
                max_log_len: 0,
                watermark_advances: 0,
                last_low: 0,
                executed: Vec::new(),
            });
        }
        let mut client_cfg = ClientConfig::new(cfg.n, cfg.mode);
        client_cfg.request_timeout = Duration::from_micros(cfg.client_timeout_us);
        client_cfg.max_retransmits = cfg.max_retransmits;
        let clients = (0..cfg.clients)
            .map(|i| {
                Ok(ClientDriver {
                    session: ClientSession::new(client_cfg.clone(), ring.keystore(client_id(i))?),
                    remaining: cfg.requests_per_client,
                })
            })
            .collect::<Result<Vec<_>, CryptoError>>()?;
        let adversary = if equivocates {
            Some(ring.keystore(ADVERSARY)?)
        } else {
            None
        };
        let correct = nodes
            .iter()
            .map(|n| !matches!(n.fault, Some(Fault::Mute | Fault::Equivocate)))
            .collect();
        let observer = Observer::new(correct, ring.keystore(0)?);
        let mut sim = Simulation {
            limits: Limits {
                max_payload: 64 << 20,
                max_frame: 65 << 20,
            },
            now: 0,
            tiebreak: 0,
            queue: BTreeMap::new(),
            in_flight: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            links: HashMap::new(),
            nodes,
            clients,
            adversary,
            adversary_next: 1,
            observer,
            stats: SimStats::default(),
            latencies: Vec::new(),
            installed: BTreeSet::new(),
            trace: Vec::new(),
            cfg,
        };
        for (&node, fault) in &sim.cfg.faults.clone() {
            if let Fault::CrashAt(at) = fault {
                sim.schedule(*at, Action::Crash(node));
            }
        }
        for i in 0..sim.clients.len() {
            sim.schedule(0, Action::ClientStart(i));
        }
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> Duration {
        Duration::from_micros(self.now)
    }

    pub fn replica(&self, id: NodeId) -> &Replica {
        &self.nodes[id as usize].replica
    }

    fn schedule(&mut self, at: u64, action: Action) {
        self.tiebreak += 1;
        self.queue.insert((at, self.tiebreak), action);
    }

    fn record(&mut self, node: NodeId, event: TraceEvent) {
        if self.cfg.trace {
            self.trace.push(TraceLine {
                t_us: self.now,
                node,
                event,
            });
        }
    }

    fn clients_done(&self) -> bool {
        self.clients
            .iter()
            .all(|c| c.remaining == 0 && c.session.outstanding() == 0)
    }

    pub fn run(&mut self, until: Until) -> SimReport {
        let outcome = loop {
            if until == Until::Quiescent && self.in_flight == 0 && self.clients_done() {
                break Outcome::Quiescent;
            }
            let Some((&(at, _), _)) = self.queue.first_key_value() else {
                break Outcome::Quiescent;
            };
            if let Until::Time(limit) = until {
                if at > us(limit) {
                    self.now = us(limit);
                    break Outcome::Deadline;
                }
            }
            if self.stats.events >= self.cfg.max_events {
                break Outcome::NonQuiescent;
            }
            let (_, action) = self.queue.pop_first().unwrap();
            self.now = at;
            self.stats.events += 1;
            self.dispatch(action);
        };
        self.report(outcome)
    }

    /// Runs to quiescence; running out of events is an error.
    pub fn run_quiescent(&mut self) -> Result<SimReport, SimError> {
        let r = self.run(Until::Quiescent);
        match r.outcome {
            Outcome::NonQuiescent => Err(SimError::NonQuiescent {
                events: r.stats.events,
            }),
            _ => Ok(r),
        }
    }

    fn report(&mut self, outcome: Outcome) -> SimReport {
        SimReport {
            outcome,
            end_us: self.now,
            stats: self.stats.clone(),
            latencies_us: self.latencies.clone(),
            replicas: self
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| ReplicaSummary {
                    id: i as NodeId,
                    correct: !matches!(n.fault, Some(Fault::Mute | Fault::Equivocate)),
                    crashed: n.crashed,
                    view: n.replica.view(),
                    last_executed: n.replica.last_executed(),
                    low_watermark: n.replica.low_watermark(),
                    max_log_len: n.max_log_len,
                    watermark_advances: n.watermark_advances,
                    lagging: n.replica.is_lagging(),
                    executed: n.executed.clone(),
                })
                .collect(),
            installed_views: self.installed.clone(),
            violations: self.observer.violations().to_vec(),
            trace: std::mem::take(&mut self.trace),
        }
    }

    fn dispatch(&mut self, action: Action) {
        match action {
            Action::Deliver { from, to, frame } => {
                self.in_flight -= 1;
                if to >= CLIENT_BASE {
                    self.deliver_client(from, (to - CLIENT_BASE) as usize, &frame);
                } else if to < self.cfg.n {
                    self.deliver_replica(from, to, &frame);
                }
            }
            Action::ReplicaTimer {
                node,
                timer,
                generation,
            } => {
                if self.nodes[node as usize].crashed {
                    return;
                }
                self.record(node, TraceEvent::Timer { timer });
                let out = self.nodes[node as usize]
                    .replica
                    .handle(Event::Timeout { timer, generation });
                self.process(node, out);
            }
            Action::ClientTimer { client, request_id } => {
                let actions = self.clients[client].session.on_timeout(request_id);
                self.client_actions(client, actions);
            }
            Action::ClientStart(client) => {
                for _ in 0..self.cfg.outstanding.max(1) {
                    self.submit_next(client);
                }
            }
            Action::Crash(node) => {
                self.nodes[node as usize].crashed = true;
                self.record(node, TraceEvent::Crash);
            }
        }
    }

    fn deliver_replica(&mut self, from: NodeId, to: NodeId, frame: &[u8]) {
        if self.nodes[to as usize].crashed {
            self.stats.lost_to_crash += 1;
            return;
        }
        let mode = self.cfg.mode;
        let env = match decode_with(frame, self.limits) {
            Ok(e) => e,
            Err(e) => return self.reject(to, from, "?", format!("{e}")),
        };
        let kind = env.kind.as_str();
        let msg = match Message::from_envelope(&env) {
            Ok(m) => m,
            Err(e) => return self.reject(to, from, kind, format!("{e}")),
        };
        let node = &self.nodes[to as usize];
        let mut verdict = verify_incoming(&env, mode, &node.keys);
        if verdict.is_accept() && env.kind != MessageKind::Request {
            verdict = verify_embedded_with(&msg, mode, &node.keys, Some(&node.cache));
        }
        if let Verdict::Reject(reason) = verdict {
            return self.reject(to, from, kind, format!("{reason:?}"));
        }
        self.record(
            to,
            TraceEvent::Deliver {
                from,
                kind,
                view: env.view,
                seq: env.seq,
            },
        );
        let event = match msg.body {
            Body::Request(request) => Event::Request(SignedRequest {
                request,
                signature: env
                    .auths
                    .into_iter()
                    .next()
                    .map(|a| a.bytes)
                    .unwrap_or_default(),
            }),
            _ => Event::Deliver(Inbound {
                message: msg,
                auths: env.auths,
            }),
        };
        let out = self.nodes[to as usize].replica.handle(event);
        self.process(to, out);
    }

    fn reject(&mut self, node: NodeId, from: NodeId, kind: &'static str, reason: String) {
        self.stats.rejected += 1;
        self.record(node, TraceEvent::Reject { from, kind, reason });
    }

    fn deliver_client(&mut self, from: NodeId, client: usize, frame: &[u8]) {
        let Some(driver) = self.clients.get_mut(client) else {
            return;
        };
        let Ok(env) = decode_with(frame, self.limits) else {
            self.stats.rejected += 1;
            return;
        };
        let before = driver.session.rejected_replies();
        let actions = driver
            .session
            .on_reply(&env, Duration::from_micros(self.now));
        if driver.session.rejected_replies() > before {
            self.reject(client_id(client), from, env.kind.as_str(), "reply".into());
        }
        self.client_actions(client, actions);
    }

    fn process(&mut self, node: NodeId, out: ProtocolOutput) {
        let ProtocolOutput {
            outbound,
            commits,
            timers,
            trace,
        } = out;
        let correct = !matches!(
            self.nodes[node as usize].fault,
            Some(Fault::Mute | Fault::Equivocate)
        );
        for rec in trace {
            if correct && rec.kind == TraceKind::NewViewInstalled && rec.view > 0 {
                self.installed.insert(rec.view);
            }
            self.record(node, TraceEvent::Protocol(rec));
        }
        for t in timers {
            if let TimerCommand::Set {
                timer,
                generation,
                after,
            } = t
            {
                self.schedule(
                    self.now + us(after),
                    Action::ReplicaTimer {
                        node,
                        timer,
                        generation,
                    },
                );
            }
        }
        for c in &commits {
            let found = self.observer.on_commit(node, c);
            self.report_violations(node, found);
            self.nodes[node as usize]
                .executed
                .extend(c.batch.iter().map(|sr| sr.request.key()));
        }
        for o in outbound {
            if self.nodes[node as usize].fault == Some(Fault::Mute) {
                self.stats.muted += 1;
                continue;
            }
            self.send(node, o);
        }
        let n = &mut self.nodes[node as usize];
        n.max_log_len = n.max_log_len.max(n.replica.log_len());
        if n.replica.low_watermark() > n.last_low {
            n.last_low = n.replica.low_watermark();
            n.watermark_advances += 1;
        }
    }

    fn report_violations(&mut self, node: NodeId, found: usize) {
        if found == 0 || !self.cfg.trace {
            return;
        }
        let all = self.observer.violations();
        let new: Vec<String> = all[all.len() - found..]
            .iter()
            .map(|v| v.to_string())
            .collect();
        for detail in new {
            self.record(node, TraceEvent::Violation { detail });
        }
    }

    fn recipients(&self, node: NodeId, to: Destination) -> Vec<NodeId> {
        match to {
            Destination::Replicas => (0..self.cfg.n).filter(|&r| r != node).collect(),
            Destination::Replica(r) => vec![r],
            Destination::Client(c) => vec![c],
        }
    }

    fn send(&mut self, node: NodeId, o: Outbound) {
        let recipients = self.recipients(node, o.to);
        match &o.message.body {
            Body::PrePrepare(_) => self.stats.pre_prepares += 1,
            Body::NewView(nv) => {
                let found = self.observer.on_new_view(node, nv);
                self.report_violations(node, found);
            }
            _ => {}
        }
        let keys = self.nodes[node as usize].keys.clone();
        if self.nodes[node as usize].fault == Some(Fault::Equivocate)
            && o.message.kind() == MessageKind::PrePrepare
            && recipients.len() >= 2
        {
            let (honest, fooled) = recipients.split_at(recipients.len() / 2);
            let conflict = self.conflicting(&o.message);
            self.stats.equivocations += 1;
            self.record(
                node,
                TraceEvent::Equivocate {
                    view: o.message.view,
                    seq: o.message.seq,
                },
            );
            let a = seal(&o.message, honest, self.cfg.mode, &keys)
                .expect("simulated keyring covers the group");
            let b = seal(&conflict, fooled, self.cfg.mode, &keys)
                .expect("simulated keyring covers the group");
            let (honest, fooled) = (honest.to_vec(), fooled.to_vec());
            self.transmit(node, &honest, &a);
            self.transmit(node, &fooled, &b);
            return;
        }
        let env = match o.presealed {
            Some(auths) => {
                let mut e = o.message.to_envelope();
                e.auths = auths;
                e
            }
            None => seal(&o.message, &recipients, self.cfg.mode, &keys)
                .expect("simulated keyring covers the group"),
        };
        self.transmit(node, &recipients, &env);
    }

    /// Same slot, different batch: one request signed by the adversary client.
    fn conflicting(&mut self, pp: &Message) -> Message {
        let keys = self
            .adversary
            .as_ref()
            .expect("adversary keys exist when a node equivocates");
        let payload = format!("conflict v{} s{}", pp.view, pp.seq).into_bytes();
        let request = Request::new(ADVERSARY, self.adversary_next, payload);
        self.adversary_next += 1;
        let signature = keys
            .sign(&request.auth_digest())
            .expect("adversary can sign");
        Message::new(
            pp.view,
            pp.seq,
            pp.sender,
            Body::PrePrepare(PrePrepareBody::new(vec![SignedRequest {
                request,
                signature,
            }])),
        )
    }

    fn partitioned(&self, a: NodeId, b: NodeId) -> bool {
        self.cfg.partitions.iter().any(|p| {
            (p.from_us..p.until_us).contains(&self.now)
                && p.nodes.contains(&a) != p.nodes.contains(&b)
        })
    }

    fn transmit(&mut self, from: NodeId, recipients: &[NodeId], env: &WireEnvelope) {
        let frame =
            Arc::new(encode_with(env, self.limits).expect("simulated frames fit the limits"));
        for &to in recipients {
            let lost = self.partitioned(from, to)
                || (self.cfg.drop_probability > 0.0
                    && self.rng.gen_bool(self.cfg.drop_probability));
            if lost {
                self.stats.dropped += 1;
                self.record(
                    from,
                    TraceEvent::Drop {
                        to,
                        kind: env.kind.as_str(),
                    },
                );
                continue;
            }
            self.stats.frames_sent += 1;
            self.stats.bytes_sent += frame.len() as u64;
            let latency = self
                .rng
                .gen_range(self.cfg.latency_min_us..=self.cfg.latency_max_us);
            let link = self.links.entry((from, to)).or_insert(0);
            let at = (self.now + latency).max(*link);
            *link = at;
            self.in_flight += 1;
            self.schedule(
                at,
                Action::Deliver {
                    from,
                    to,
                    frame: frame.clone(),
                },
            );
        }
    }

    fn payload(&self, client: usize, request_id: u64) -> Vec<u8> {
        let mut p = vec![0u8; self.cfg.value_size.max(16)];
        p[..8].copy_from_slice(&request_id.to_le_bytes());
        p[8..16].copy_from_slice(&(client as u64).to_le_bytes());
        for (i, b) in p.iter_mut().enumerate().skip(16) {
            *b = (i as u64 ^ request_id) as u8;
        }
        p.truncate(self.cfg.value_size.max(1));
        p
    }

    fn submit_next(&mut self, client: usize) {
        let driver = &mut self.clients[client];
        if driver.remaining == 0 {
            return;
        }
        driver.remaining -= 1;
        let next_id = self.cfg.requests_per_client - driver.remaining;
        let payload = self.payload(client, next_id);
        let driver = &mut self.clients[client];
        let sr = driver
            .session
            .prepare(payload)
            .expect("client keys can sign");
        self.observer.on_submit(&sr.request);
        self.stats.submitted += 1;
        let actions = driver
            .session
            .submit_prepared(sr, Duration::from_micros(self.now));
        self.client_actions(client, actions);
    }

    fn client_actions(&mut self, client: usize, actions: Vec<ClientAction>) {
        let me = client_id(client);
        for a in actions {
            match a {
                ClientAction::Send { to, envelope } => {
                    let recipients: Vec<NodeId> = match to {
                        Target::Replica(r) => vec![r],
                        Target::AllReplicas => (0..self.cfg.n).collect(),
                    };
                    self.transmit(me, &recipients, &envelope);
                }
                ClientAction::SetTimer { request_id, after } => {
                    self.schedule(
                        self.now + us(after),
                        Action::ClientTimer { client, request_id },
                    );
                }
                ClientAction::Complete(c) => {
                    self.stats.completed += 1;
                    let latency_us = us(c.latency);
                    self.latencies.push(latency_us);
                    self.observer.on_completion(me, c.request_id, c.result);
                    self.record(
                        me,
                        TraceEvent::Completed {
                            request_id: c.request_id,
                            latency_us,
                        },
                    );
                    self.submit_next(client);
                }
                ClientAction::Failed(request_id) => {
                    self.stats.failed += 1;
                    self.record(me, TraceEvent::Failed { request_id });
                    self.submit_next(client);
                }
            }
        }
    }
}

/// Builds and runs a simulation to quiescence.
pub fn simulate(cfg: SimConfig) -> Result<SimReport, SimError> {
    Simulation::new(cfg)?.run_quiescent()
}

#[cfg(test)]
mod tests;
