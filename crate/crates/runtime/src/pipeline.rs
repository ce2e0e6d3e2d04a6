//! Seven-stage message pipeline around a single replica.
//!
//! 1. unmarshal, on the caller's thread (one per connection)
//! 2. hash + verify, worker pool
//! 3. decide, one thread owning the [`Replica`]
//! 4. outbound hash, worker pool (also signs when `merge_hash_sign`)
//! 5. clone, one item per recipient
//! 6. sign/MAC, worker pool
//! 7. marshal, one thread per destination
//!
//! Stage 2 workers may finish out of order. Every frame is stamped per
//! origin in stage 1 and stage 3 releases items through a [`Reorder`]
//! buffer, so the replica sees each origin's messages in arrival order.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, SendTimeoutError, Sender};
use thiserror::Error;

use pbft_core::crypto::{
    hash_incoming, scheme_for, verify_auth, verify_embedded_with, AuthScheme, BatchCache,
    CryptoMode, Digest, KeyStore,
};
use pbft_core::message::{auth_digest_of, Body, Message, SignedRequest};
use pbft_core::replica::{
    Committed, Destination, Event, Inbound, ProtocolOutput, Replica, TimerCommand, TimerKind,
    TraceRecord,
};
use pbft_core::wire::{
    decode_with, encode_with, AuthEntry, Limits, MessageKind, NodeId, WireEnvelope, SIGNATURE_SLOT,
};

use crate::metrics::{Counters, Stage, StageMetrics};
use crate::reorder::Reorder;

const POLL: Duration = Duration::from_millis(50);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    pub verify_parallelism: usize,
    pub sign_parallelism: usize,
    pub hash_tx_parallelism: usize,
    pub queue_capacity: usize,
    pub merge_hash_sign: bool,
    pub instrument: bool,
    pub limits: Limits,
    /// Verified batches remembered for skipping client-signature checks.
    pub batch_cache: usize,
}

impl PipelineConfig {
    pub fn for_mode(mode: CryptoMode) -> Self {
        let half = (thread::available_parallelism().map_or(1, |n| n.get()) / 2).max(1);
        PipelineConfig {
            verify_parallelism: half,
            sign_parallelism: half,
            hash_tx_parallelism: 2,
            queue_capacity: 4096,
            merge_hash_sign: mode == CryptoMode::PkOnly,
            instrument: false,
            limits: Limits::default(),
            batch_cache: 4096,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [
            ("verify_parallelism", self.verify_parallelism),
            ("sign_parallelism", self.sign_parallelism),
            ("hash_tx_parallelism", self.hash_tx_parallelism),
            ("queue_capacity", self.queue_capacity),
        ] {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("cannot spawn pipeline thread: {0}")]
    Spawn(#[from] std::io::Error),
}

/// Where stage 7 hands finished frames.
pub trait Egress: Send + Sync + 'static {
    fn send(&self, to: NodeId, frame: Vec<u8>);
}

/// Optional sinks for what the replica produces besides messages.
#[derive(Default)]
pub struct PipelineIo {
    pub commits: Option<Sender<Committed>>,
    pub trace: Option<Sender<TraceRecord>>,
    /// `(origin, stamp)` of every verified item as stage 3 takes it.
    pub arrivals: Option<Sender<(NodeId, u64)>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReplicaStatus {
    pub view: u64,
    pub last_executed: u64,
    pub low_watermark: u64,
    pub log_len: usize,
    pub max_log_len: usize,
    pub watermark_advances: u64,
}

struct Decoded {
    origin: NodeId,
    stamp: u64,
    env: WireEnvelope,
    msg: Message,
}

enum ToDecide {
    Item {
        origin: NodeId,
        stamp: u64,
        kind: MessageKind,
        event: Option<Event>,
    },
    Local(Event),
}

struct Outgoing {
    message: Message,
    presealed: Option<Vec<AuthEntry>>,
    recipients: Vec<NodeId>,
}

enum ToClone {
    Ready(WireEnvelope, Vec<NodeId>),
    Unsealed(Arc<Fanout>),
}

/// One outbound message whose authenticator is being assembled by several
/// stage-6 workers. The last one to finish releases the frame.
struct Fanout {
    env: WireEnvelope,
    digest: Digest,
    scheme: AuthScheme,
    recipients: Vec<NodeId>,
    tags: Mutex<Vec<Option<AuthEntry>>>,
    remaining: AtomicUsize,
}

struct SignJob {
    fanout: Arc<Fanout>,
    index: usize,
}

struct Shared {
    cfg: PipelineConfig,
    mode: CryptoMode,
    keys: KeyStore,
    metrics: Arc<StageMetrics>,
    counters: Arc<Counters>,
    cache: BatchCache,
    egress: Arc<dyn Egress>,
    stop: AtomicBool,
    status: Mutex<ReplicaStatus>,
    marshal: Mutex<HashMap<NodeId, Sender<Arc<WireEnvelope>>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Shared {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    fn spawn(
        self: &Arc<Self>,
        name: String,
        f: impl FnOnce() + Send + 'static,
    ) -> Result<(), PipelineError> {
        let h = thread::Builder::new().name(name).spawn(f)?;
        self.threads
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(h);
        Ok(())
    }

    /// Stage 7 entry: the per-destination marshal thread is created on first use.
    fn marshal(self: &Arc<Self>, to: NodeId, env: Arc<WireEnvelope>) {
        let tx = {
            let mut m = self.marshal.lock().unwrap_or_else(|e| e.into_inner());
            match m.get(&to) {
                Some(tx) => tx.clone(),
                None => {
                    let (tx, rx) = bounded(self.cfg.queue_capacity);
                    let me = self.clone();
                    if self
                        .spawn(format!("marshal-{to}"), move || me.marshal_loop(to, rx))
                        .is_err()
                    {
                        log::error!("cannot start marshal thread for {to}");
                        return;
                    }
                    m.insert(to, tx.clone());
                    tx
                }
            }
        };
        send(self, &tx, env);
    }

    fn marshal_loop(&self, to: NodeId, rx: Receiver<Arc<WireEnvelope>>) {
        while let Some(env) = recv(self, &rx) {
            let frame = self.metrics.time(Stage::Marshal, env.kind, || {
                encode_with(&env, self.cfg.limits)
            });
            match frame {
                Ok(f) => {
                    Counters::add(&self.counters.marshaled, 1);
                    self.egress.send(to, f);
                }
                Err(e) => log::warn!("cannot encode {} for {to}: {e}", env.kind),
            }
        }
    }
}

/// Receives until the pipeline stops or every sender is gone.
fn recv<T>(shared: &Shared, rx: &Receiver<T>) -> Option<T> {
    loop {
        match rx.recv_timeout(POLL) {
            Ok(v) => return Some(v),
            Err(RecvTimeoutError::Timeout) if !shared.stopped() => {}
            Err(_) => return None,
        }
    }
}

/// Blocking send that gives up once the pipeline stops.
fn send<T>(shared: &Shared, tx: &Sender<T>, mut item: T) -> bool {
    loop {
        match tx.send_timeout(item, POLL) {
            Ok(()) => return true,
            Err(SendTimeoutError::Timeout(back)) if !shared.stopped() => item = back,
            Err(_) => return false,
        }
    }
}

/// Stage 1. Cloned into every connection reader.
#[derive(Clone)]
pub struct Ingress {
    shared: Arc<Shared>,
    stamps: Arc<Mutex<HashMap<NodeId, u64>>>,
    tx: Sender<Decoded>,
}

impl Ingress {
    /// Decodes `frame` from `origin` and queues it for verification.
    /// Returns false for malformed frames. Blocks while stage 2 is full.
    pub fn push(&self, origin: NodeId, frame: &[u8]) -> bool {
        let s = &self.shared;
        let t = Instant::now();
        let decoded = decode_with(frame, s.cfg.limits)
            .ok()
            .and_then(|env| Message::from_envelope(&env).ok().map(|msg| (env, msg)));
        let Some((env, msg)) = decoded else {
            Counters::add(&s.counters.malformed, 1);
            return false;
        };
        s.metrics
            .record(Stage::Unmarshal, env.kind, t.elapsed().as_nanos() as u64);
        let stamp = {
            let mut st = self.stamps.lock().unwrap_or_else(|e| e.into_inner());
            let e = st.entry(origin).or_insert(0);
            *e += 1;
            *e - 1
        };
        // Sends from one origin come from one reader thread, so stamps
        // reach the channel in order; the reorder buffer covers the rest.
        send(
            s,
            &self.tx,
            Decoded {
                origin,
                stamp,
                env,
                msg,
            },
        );
        true
    }
}

pub struct Pipeline {
    shared: Arc<Shared>,
    ingress: Ingress,
    local: Sender<ToDecide>,
    id: NodeId,
}

impl Pipeline {
    pub fn start(
        cfg: PipelineConfig,
        replica: Replica,
        keys: KeyStore,
        egress: Arc<dyn Egress>,
        io: PipelineIo,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let mode = replica.config().mode;
        let id = replica.id();
        let n = replica.config().n;
        let shared = Arc::new(Shared {
            metrics: Arc::new(StageMetrics::new(cfg.instrument)),
            counters: Arc::new(Counters::default()),
            cache: BatchCache::new(cfg.batch_cache),
            cfg,
            mode,
            keys,
            egress,
            stop: AtomicBool::new(false),
            status: Mutex::new(ReplicaStatus::default()),
            marshal: Mutex::new(HashMap::new()),
            threads: Mutex::new(Vec::new()),
        });
        let cap = shared.cfg.queue_capacity;
        let (in_tx, in_rx) = bounded::<Decoded>(cap);
        let (dec_tx, dec_rx) = bounded::<ToDecide>(cap);
        let (hash_tx, hash_rx) = bounded::<Outgoing>(cap);
        let (clone_tx, clone_rx) = bounded::<ToClone>(cap);
        let (sign_tx, sign_rx) = bounded::<SignJob>(cap);

        for i in 0..shared.cfg.verify_parallelism {
            let (s, rx, tx) = (shared.clone(), in_rx.clone(), dec_tx.clone());
            shared.spawn(format!("verify-{i}"), move || verify_loop(&s, rx, tx))?;
        }
        let decider = Decider {
            shared: shared.clone(),
            replica,
            n,
            reorder: Reorder::new(),
            timers: BTreeMap::new(),
            out: hash_tx,
            io,
            last_low: 0,
        };
        shared.spawn("decide".into(), move || decider.run(dec_rx))?;
        for i in 0..shared.cfg.hash_tx_parallelism {
            let (s, rx, tx) = (shared.clone(), hash_rx.clone(), clone_tx.clone());
            shared.spawn(format!("hash-tx-{i}"), move || hash_loop(&s, rx, tx))?;
        }
        {
            let s = shared.clone();
            shared.spawn("clone".into(), move || clone_loop(&s, clone_rx, sign_tx))?;
        }
        for i in 0..shared.cfg.sign_parallelism {
            let (s, rx) = (shared.clone(), sign_rx.clone());
            shared.spawn(format!("sign-{i}"), move || sign_loop(&s, rx))?;
        }
        Ok(Pipeline {
            ingress: Ingress {
                shared: shared.clone(),
                stamps: Arc::new(Mutex::new(HashMap::new())),
                tx: in_tx,
            },
            shared,
            local: dec_tx,
            id,
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn ingress(&self) -> Ingress {
        self.ingress.clone()
    }

    /// Hands an event straight to stage 3, skipping verification.
    pub fn inject(&self, event: Event) {
        send(&self.shared, &self.local, ToDecide::Local(event));
    }

    pub fn metrics(&self) -> Arc<StageMetrics> {
        self.shared.metrics.clone()
    }

    pub fn counters(&self) -> Arc<Counters> {
        self.shared.counters.clone()
    }

    pub fn status(&self) -> ReplicaStatus {
        *self.shared.status.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Stops every stage and waits for the threads. Queued items are discarded.
    pub fn shutdown(self) {}

    fn stop_and_join(&self) {
        self.shared.stop.store(true, Ordering::Release);
        loop {
            let batch: Vec<_> = std::mem::take(
                &mut *self
                    .shared
                    .threads
                    .lock()
                    .unwrap_or_else(|e| e.into_inner()),
            );
            if batch.is_empty() {
                break;
            }
            for h in batch {
                let _ = h.join();
            }
        }
    }
}

impl Drop for Pipeline {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

fn verify_loop(s: &Shared, rx: Receiver<Decoded>, tx: Sender<ToDecide>) {
    while let Some(d) = recv(s, &rx) {
        Counters::add(&s.counters.verify_in, 1);
        let kind = d.env.kind;
        let digest = s
            .metrics
            .time(Stage::HashRx, kind, || hash_incoming(&d.env, &d.msg));
        let ok = digest.is_ok_and(|dg| {
            s.metrics.time(Stage::Verify, kind, || {
                verify_auth(&d.env, &dg, s.mode, &s.keys).is_accept()
                    && (kind == MessageKind::Request
                        || verify_embedded_with(&d.msg, s.mode, &s.keys, Some(&s.cache))
                            .is_accept())
            })
        });
        let event = if ok {
            Some(match d.msg.body {
                Body::Request(request) => Event::Request(SignedRequest {
                    request,
                    signature: d
                        .env
                        .auths
                        .into_iter()
                        .next()
                        .map(|a| a.bytes)
                        .unwrap_or_default(),
                }),
                _ => Event::Deliver(Inbound {
                    message: d.msg,
                    auths: d.env.auths,
                }),
            })
        } else {
            Counters::add(&s.counters.rejected, 1);
            log::debug!("rejected {kind} from {}", d.origin);
            None
        };
        // Rejected items still pass through so the stamp sequence stays dense.
        let item = ToDecide::Item {
            origin: d.origin,
            stamp: d.stamp,
            kind,
            event,
        };
        if !send(s, &tx, item) {
            return;
        }
    }
}

struct Decider {
    shared: Arc<Shared>,
    replica: Replica,
    n: u16,
    reorder: Reorder<(u64, MessageKind, Option<Event>)>,
    timers: BTreeMap<TimerKind, (Instant, u64)>,
    out: Sender<Outgoing>,
    io: PipelineIo,
    last_low: u64,
}

impl Decider {
    fn run(mut self, rx: Receiver<ToDecide>) {
        loop {
            let wait = self
                .timers
                .values()
                .map(|(at, _)| at.saturating_duration_since(Instant::now()))
                .min()
                .map_or(POLL, |d| d.min(POLL));
            match rx.recv_timeout(wait) {
                Ok(ToDecide::Item {
                    origin,
                    stamp,
                    kind,
                    event,
                }) => {
                    for (stamp, kind, ev) in self.reorder.push(origin, stamp, (stamp, kind, event))
                    {
                        let Some(ev) = ev else { continue };
                        Counters::add(&self.shared.counters.decided, 1);
                        if let Some(tx) = &self.io.arrivals {
                            let _ = tx.send((origin, stamp));
                        }
                        self.decide(kind, ev);
                    }
                }
                Ok(ToDecide::Local(ev)) => {
                    let kind = match &ev {
                        Event::Deliver(i) => i.message.kind(),
                        _ => MessageKind::Request,
                    };
                    self.decide(kind, ev);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
            if self.shared.stopped() {
                return;
            }
            self.fire_timers();
        }
    }

    fn fire_timers(&mut self) {
        let now = Instant::now();
        let due: Vec<(TimerKind, u64)> = self
            .timers
            .iter()
            .filter(|(_, (at, _))| *at <= now)
            .map(|(k, (_, g))| (*k, *g))
            .collect();
        for (timer, generation) in due {
            self.timers.remove(&timer);
            let out = self.replica.handle(Event::Timeout { timer, generation });
            self.apply(out);
        }
    }

    fn decide(&mut self, kind: MessageKind, ev: Event) {
        let m = self.shared.metrics.clone();
        let out = m.time(Stage::Decide, kind, || self.replica.handle(ev));
        self.apply(out);
    }

    fn apply(&mut self, out: ProtocolOutput) {
        let s = &self.shared;
        for t in out.timers {
            match t {
                TimerCommand::Set {
                    timer,
                    generation,
                    after,
                } => {
                    self.timers
                        .insert(timer, (Instant::now() + after, generation));
                }
                TimerCommand::Cancel { timer } => {
                    self.timers.remove(&timer);
                }
            }
        }
        for c in out.commits {
            Counters::add(&s.counters.committed_batches, 1);
            Counters::add(&s.counters.committed_requests, c.batch.len() as u64);
            if let Some(tx) = &self.io.commits {
                let _ = tx.send(c);
            }
        }
        if let Some(tx) = &self.io.trace {
            for t in out.trace {
                let _ = tx.send(t);
            }
        }
        {
            let r = &self.replica;
            let mut st = s.status.lock().unwrap_or_else(|e| e.into_inner());
            st.view = r.view();
            st.last_executed = r.last_executed();
            st.low_watermark = r.low_watermark();
            st.log_len = r.log_len();
            st.max_log_len = st.max_log_len.max(st.log_len);
            if st.low_watermark > self.last_low {
                st.watermark_advances += 1;
                self.last_low = st.low_watermark;
            }
        }
        let me = self.replica.id();
        for o in out.outbound {
            if let Body::PrePrepare(pp) = &o.message.body {
                // Our own proposal: its requests were verified on arrival.
                s.cache.insert(pp.batch_digest, &pp.batch);
                Counters::add(&s.counters.pre_prepares, 1);
            }
            let recipients: Vec<NodeId> = match o.to {
                Destination::Replicas => (0..self.n).filter(|&r| r != me).collect(),
                Destination::Replica(r) | Destination::Client(r) => vec![r],
            };
            if recipients.is_empty() {
                continue;
            }
            Counters::add(&s.counters.destinations, recipients.len() as u64);
            let item = Outgoing {
                message: o.message,
                presealed: o.presealed,
                recipients,
            };
            if !send(s, &self.out, item) {
                return;
            }
        }
    }
}

fn hash_loop(s: &Shared, rx: Receiver<Outgoing>, tx: Sender<ToClone>) {
    while let Some(o) = recv(s, &rx) {
        let kind = o.message.kind();
        if let Some(auths) = o.presealed {
            let mut env = o.message.to_envelope();
            env.auths = auths;
            if !send(s, &tx, ToClone::Ready(env, o.recipients)) {
                return;
            }
            continue;
        }
        let hashed = s.metrics.time(Stage::HashTx, kind, || {
            let env = o.message.to_envelope();
            auth_digest_of(&env).map(|d| (env, d))
        });
        let Ok((mut env, digest)) = hashed else {
            log::warn!("cannot hash outbound {kind}");
            continue;
        };
        let scheme = scheme_for(kind, s.mode);
        let item = if scheme != AuthScheme::Mac && s.cfg.merge_hash_sign {
            let sig = s
                .metrics
                .time(Stage::SignMac, kind, || s.keys.sign(&digest));
            match sig {
                Ok(sig) => {
                    Counters::add(&s.counters.signatures, 1);
                    env.auths = vec![AuthEntry {
                        recipient: SIGNATURE_SLOT,
                        bytes: sig,
                    }];
                    ToClone::Ready(env, o.recipients)
                }
                Err(e) => {
                    log::error!("cannot sign {kind}: {e}");
                    continue;
                }
            }
        } else {
            let k = o.recipients.len();
            ToClone::Unsealed(Arc::new(Fanout {
                env,
                digest,
                scheme,
                tags: Mutex::new(vec![None; k]),
                remaining: AtomicUsize::new(k),
                recipients: o.recipients,
            }))
        };
        if !send(s, &tx, item) {
            return;
        }
    }
}

fn clone_loop(s: &Arc<Shared>, rx: Receiver<ToClone>, tx: Sender<SignJob>) {
    while let Some(item) = recv(s, &rx) {
        match item {
            ToClone::Ready(env, recipients) => {
                let env = Arc::new(env);
                for r in recipients {
                    Counters::add(&s.counters.cloned, 1);
                    s.marshal(r, env.clone());
                }
            }
            ToClone::Unsealed(f) => {
                for index in 0..f.recipients.len() {
                    Counters::add(&s.counters.cloned, 1);
                    let job = SignJob {
                        fanout: f.clone(),
                        index,
                    };
                    if !send(s, &tx, job) {
                        return;
                    }
                }
            }
        }
    }
}

fn sign_loop(s: &Arc<Shared>, rx: Receiver<SignJob>) {
    while let Some(SignJob { fanout: f, index }) = recv(s, &rx) {
        let kind = f.env.kind;
        let entry = match f.scheme {
            AuthScheme::Mac => {
                let r = f.recipients[index];
                let tag = s.metrics.time(Stage::SignMac, kind, || {
                    s.keys.mac_key(r).map(|k| k.tag(&f.digest))
                });
                Counters::add(&s.counters.macs, 1);
                match tag {
                    Ok(t) => Some(AuthEntry {
                        recipient: r,
                        bytes: t.to_vec(),
                    }),
                    Err(e) => {
                        log::warn!("no MAC key for {r}: {e}");
                        None
                    }
                }
            }
            // one signature serves every recipient
            AuthScheme::Signature | AuthScheme::Absent if index == 0 => {
                let sig = s
                    .metrics
                    .time(Stage::SignMac, kind, || s.keys.sign(&f.digest));
                Counters::add(&s.counters.signatures, 1);
                match sig {
                    Ok(bytes) => Some(AuthEntry {
                        recipient: SIGNATURE_SLOT,
                        bytes,
                    }),
                    Err(e) => {
                        log::error!("cannot sign {kind}: {e}");
                        None
                    }
                }
            }
            _ => None,
        };
        f.tags.lock().unwrap_or_else(|e| e.into_inner())[index] = entry;
        if f.remaining.fetch_sub(1, Ordering::AcqRel) != 1 {
            continue;
        }
        let mut env = f.env.clone();
        env.auths = f
            .tags
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter_mut()
            .filter_map(Option::take)
            .collect();
        if env.auths.is_empty() {
            continue;
        }
        let env = Arc::new(env);
        for &r in &f.recipients {
            s.marshal(r, env.clone());
        }
    }
}

#[cfg(test)]
mod tests;
