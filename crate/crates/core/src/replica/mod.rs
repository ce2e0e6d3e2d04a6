//! The replica state machine.
//!
//! [`Replica::handle`] consumes one event (a message whose authenticators
//! and embedded signatures were already checked, a client request, or a
//! timer) and returns everything it wants done as a [`ProtocolOutput`].
//! Nothing here performs I/O, reads a clock or touches key material, so a
//! replayed event sequence reproduces the same outputs.
//!
//! Replicas that miss a proposal commit from the batch attached to a quorum
//! of COMMIT votes. A replica that falls behind a stable checkpoint held by
//! the others has no state transfer and stops executing.

mod types;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::crypto::{Digest, Hasher};
use crate::message::{
    noop_digest, Batch, Body, Certificate, CheckpointBody, DetachedEnvelope, Message, NewViewBody,
    PrePrepareBody, ReplyBody, RequestKey, SignedRequest, ViewChangeBody, VoteBody,
};
use crate::wire::{AuthEntry, MessageKind, NodeId, Seq, View, SIGNATURE_SLOT};

pub use types::*;

/// How far ahead of the current view votes are buffered.
const VIEW_LOOKAHEAD: View = 16;

#[derive(Clone, Debug)]
struct Proposal {
    view: View,
    digest: Digest,
    /// The primary's PRE_PREPARE; absent for entries installed from a NEW_VIEW.
    pre_prepare: Option<DetachedEnvelope>,
}

#[derive(Clone, Debug, Default)]
struct Slot {
    proposal: Option<Proposal>,
    batches: BTreeMap<Digest, Batch>,
    prepares: BTreeMap<View, BTreeMap<NodeId, DetachedEnvelope>>,
    commits: BTreeMap<View, BTreeMap<NodeId, DetachedEnvelope>>,
    /// Highest-view prepare certificate; survives view changes.
    prepared: Option<Certificate>,
    commit_sent: Option<View>,
    decided: Option<(View, Digest)>,
    frozen: Option<View>,
}

#[derive(Clone, Debug)]
struct StoredViewChange {
    body: ViewChangeBody,
    detached: DetachedEnvelope,
}

#[derive(Clone, Copy, Debug, Default)]
struct Timer {
    generation: u64,
    running: bool,
}

#[derive(Debug)]
pub struct Replica {
    cfg: ReplicaConfig,
    view: View,
    /// Target view while a view change is in progress.
    changing: Option<View>,
    low: Seq,
    stable_proof: Certificate,
    next_seq: Seq,
    last_executed: Seq,
    chain: Digest,
    slots: BTreeMap<Seq, Slot>,
    checkpoints: BTreeMap<Seq, BTreeMap<NodeId, DetachedEnvelope>>,
    own_checkpoints: BTreeMap<Seq, Digest>,
    replies: BTreeMap<NodeId, ReplyBody>,
    /// Requests seen but not executed yet.
    watched: BTreeMap<RequestKey, SignedRequest>,
    pending: VecDeque<SignedRequest>,
    pending_keys: BTreeSet<RequestKey>,
    in_flight: BTreeSet<RequestKey>,
    view_changes: BTreeMap<View, BTreeMap<NodeId, StoredViewChange>>,
    equivocations: Vec<Equivocation>,
    batch_timer: Timer,
    vc_timer: Timer,
    vc_attempts: u32,
    deferred: bool,
    lagging: bool,
}

fn vote(
    kind: MessageKind,
    view: View,
    seq: Seq,
    sender: NodeId,
    d: Digest,
    auths: Vec<AuthEntry>,
) -> DetachedEnvelope {
    DetachedEnvelope {
        kind,
        view,
        seq,
        sender,
        core: d.0.to_vec(),
        auths,
    }
}

fn voted_digest(det: &DetachedEnvelope) -> Option<Digest> {
    det.vote_digest()
}

impl Replica {
    pub fn new(cfg: ReplicaConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        Ok(Replica {
            cfg,
            view: 0,
            changing: None,
            low: 0,
            stable_proof: Certificate::default(),
            next_seq: 1,
            last_executed: 0,
            chain: Digest([0; 32]),
            slots: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            own_checkpoints: BTreeMap::new(),
            replies: BTreeMap::new(),
            watched: BTreeMap::new(),
            pending: VecDeque::new(),
            pending_keys: BTreeSet::new(),
            in_flight: BTreeSet::new(),
            view_changes: BTreeMap::new(),
            equivocations: Vec::new(),
            batch_timer: Timer::default(),
            vc_timer: Timer::default(),
            vc_attempts: 0,
            deferred: false,
            lagging: false,
        })
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    pub fn id(&self) -> NodeId {
        self.cfg.id
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn view_changing_to(&self) -> Option<View> {
        self.changing
    }

    pub fn is_primary(&self) -> bool {
        self.changing.is_none() && self.cfg.primary(self.view) == self.cfg.id
    }

    pub fn low_watermark(&self) -> Seq {
        self.low
    }

    pub fn last_executed(&self) -> Seq {
        self.last_executed
    }

    pub fn next_seq(&self) -> Seq {
        self.next_seq
    }

    /// Live log entries.
    pub fn log_len(&self) -> usize {
        self.slots.len()
    }

    pub fn equivocations(&self) -> &[Equivocation] {
        &self.equivocations
    }

    pub fn is_lagging(&self) -> bool {
        self.lagging
    }

    pub fn pending_requests(&self) -> usize {
        self.pending.len()
    }

    pub fn status(&self, seq: Seq) -> Option<Status> {
        let slot = self.slots.get(&seq)?;
        if slot.decided.is_some() {
            Some(Status::Committed)
        } else if slot.prepared.as_ref().is_some_and(|c| c.view == self.view) {
            Some(Status::Prepared)
        } else if slot.proposal.as_ref().is_some_and(|p| p.view == self.view) {
            Some(Status::PrePrepared)
        } else {
            None
        }
    }

    pub fn prepared_certificate(&self, seq: Seq) -> Option<&Certificate> {
        self.slots.get(&seq)?.prepared.as_ref()
    }

    /// Digest over the reply cache and the executed-batch chain.
    pub fn state_digest(&self) -> Digest {
        let mut cache = Hasher::new();
        for (c, r) in &self.replies {
            cache
                .update(&c.to_le_bytes())
                .update(&r.request_id.to_le_bytes())
                .update(&r.batch_seq.to_le_bytes())
                .update(&r.result.0);
        }
        let cache = cache.finish();
        let mut h = Hasher::new();
        h.update(&self.chain.0).update(&cache.0);
        h.finish()
    }

    pub fn handle(&mut self, event: Event) -> ProtocolOutput {
        let mut out = ProtocolOutput::default();
        match event {
            Event::Request(r) => self.on_request(r, &mut out),
            Event::Timeout { timer, generation } => self.on_timeout(timer, generation, &mut out),
            Event::Deliver(inb) => self.on_message(inb, &mut out),
        }
        out
    }

    fn on_message(&mut self, inb: Inbound, out: &mut ProtocolOutput) {
        let Inbound { message, auths } = inb;
        let Message {
            view,
            seq,
            sender,
            body,
        } = message;
        if sender == self.cfg.id {
            return;
        }
        match body {
            Body::Request(request) => {
                let signature = auths
                    .into_iter()
                    .find(|a| a.recipient == SIGNATURE_SLOT)
                    .map(|a| a.bytes)
                    .unwrap_or_default();
                self.on_request(SignedRequest { request, signature }, out)
            }
            Body::PrePrepare(pp) => self.on_pre_prepare(view, seq, sender, pp, auths, out),
            Body::Prepare(v) => {
                self.on_vote(MessageKind::Prepare, view, seq, sender, v, auths, out)
            }
            Body::Commit(v) => self.on_vote(MessageKind::Commit, view, seq, sender, v, auths, out),
            Body::Checkpoint(c) => self.on_checkpoint(view, seq, sender, c, auths, out),
            Body::ViewChange(vc) => {
                let msg = Message::new(view, seq, sender, Body::ViewChange(vc));
                let detached = msg.detach(auths);
                let Body::ViewChange(body) = msg.body else {
                    unreachable!()
                };
                self.on_view_change(sender, body, detached, out)
            }
            Body::NewView(nv) => self.on_new_view(sender, nv, out),
            Body::Reply(_) => {}
        }
    }

    // ---- timers ----

    fn set_timer(&mut self, kind: TimerKind, after: std::time::Duration, out: &mut ProtocolOutput) {
        let t = match kind {
            TimerKind::Batch => &mut self.batch_timer,
            TimerKind::ViewChange => &mut self.vc_timer,
        };
        t.generation += 1;
        t.running = true;
        out.timers.push(TimerCommand::Set {
            timer: kind,
            generation: t.generation,
            after,
        });
    }

    fn cancel_timer(&mut self, kind: TimerKind, out: &mut ProtocolOutput) {
        let t = match kind {
            TimerKind::Batch => &mut self.batch_timer,
            TimerKind::ViewChange => &mut self.vc_timer,
        };
        if t.running {
            t.running = false;
            t.generation += 1;
            out.timers.push(TimerCommand::Cancel { timer: kind });
        }
    }

    fn vc_timeout(&self) -> std::time::Duration {
        self.cfg.view_change_timeout * 2u32.saturating_pow(self.vc_attempts.min(16))
    }

    fn ensure_vc_timer(&mut self, out: &mut ProtocolOutput) {
        if !self.vc_timer.running {
            let after = self.vc_timeout();
            self.set_timer(TimerKind::ViewChange, after, out);
        }
    }

    fn on_timeout(&mut self, timer: TimerKind, generation: u64, out: &mut ProtocolOutput) {
        match timer {
            TimerKind::Batch => {
                if !self.batch_timer.running || self.batch_timer.generation != generation {
                    return;
                }
                self.batch_timer.running = false;
                self.try_propose(true, out);
            }
            TimerKind::ViewChange => {
                if !self.vc_timer.running || self.vc_timer.generation != generation {
                    return;
                }
                self.vc_timer.running = false;
                let target = self.changing.unwrap_or(self.view) + 1;
                self.start_view_change(target, out);
            }
        }
    }

    // ---- requests and proposals ----

    fn trace(
        &self,
        out: &mut ProtocolOutput,
        kind: TraceKind,
        view: View,
        seq: Seq,
        digest: Option<Digest>,
    ) {
        out.trace.push(TraceRecord {
            kind,
            view,
            seq,
            digest,
        });
    }

    fn reply_message(&self, r: &ReplyBody) -> Outbound {
        Outbound {
            to: Destination::Client(r.client_id),
            message: Message::new(self.view, r.batch_seq, self.cfg.id, Body::Reply(r.clone())),
            presealed: None,
        }
    }

    fn already_executed(&self, key: RequestKey) -> bool {
        self.replies
            .get(&key.client)
            .is_some_and(|r| r.request_id >= key.id)
    }

    fn on_request(&mut self, sr: SignedRequest, out: &mut ProtocolOutput) {
        let key = sr.request.key();
        if let Some(r) = self.replies.get(&key.client) {
            if r.request_id == key.id {
                let msg = self.reply_message(r);
                out.outbound.push(msg);
                return;
            }
            if r.request_id > key.id {
                return;
            }
        }
        if self.is_primary() {
            if self.in_flight.contains(&key) || self.pending_keys.contains(&key) {
                return;
            }
            self.watched.insert(key, sr.clone());
            self.ensure_vc_timer(out);
            self.pending_keys.insert(key);
            self.pending.push_back(sr);
            self.try_propose(false, out);
            return;
        }
        self.watched.insert(key, sr.clone());
        self.ensure_vc_timer(out);
        if self.changing.is_none() {
            let primary = self.cfg.primary(self.view);
            out.outbound.push(Outbound {
                to: Destination::Replica(primary),
                message: Message::new(0, 0, key.client, Body::Request(sr.request)),
                presealed: Some(vec![AuthEntry {
                    recipient: SIGNATURE_SLOT,
                    bytes: sr.signature,
                }]),
            });
        }
    }

    fn window_open(&self) -> bool {
        self.next_seq <= self.low + self.cfg.log_capacity
    }

    fn try_propose(&mut self, flush: bool, out: &mut ProtocolOutput) {
        if !self.is_primary() {
            return;
        }
        while !self.pending.is_empty() {
            if !flush && self.pending.len() < self.cfg.batch_size {
                if !self.batch_timer.running {
                    let after = self.cfg.batch_timeout;
                    self.set_timer(TimerKind::Batch, after, out);
                }
                return;
            }
            if !self.window_open() {
                if !self.deferred {
                    self.deferred = true;
                    self.trace(out, TraceKind::Deferred, self.view, self.next_seq, None);
                }
                return;
            }
            self.deferred = false;
            let take = self.pending.len().min(self.cfg.batch_size);
            let batch: Batch = self.pending.drain(..take).collect();
            self.propose(batch, out);
        }
        self.cancel_timer(TimerKind::Batch, out);
    }

    fn propose(&mut self, batch: Batch, out: &mut ProtocolOutput) {
        let seq = self.next_seq;
        self.next_seq += 1;
        for r in &batch {
            let k = r.request.key();
            self.pending_keys.remove(&k);
            self.in_flight.insert(k);
        }
        let pp = PrePrepareBody::new(batch);
        let d = pp.batch_digest;
        let view = self.view;
        let me = self.cfg.id;
        let slot = self.slots.entry(seq).or_default();
        slot.batches.insert(d, pp.batch.clone());
        slot.proposal = Some(Proposal {
            view,
            digest: d,
            pre_prepare: Some(vote(MessageKind::PrePrepare, view, seq, me, d, Vec::new())),
        });
        out.outbound.push(Outbound {
            to: Destination::Replicas,
            message: Message::new(view, seq, me, Body::PrePrepare(pp)),
            presealed: None,
        });
        self.trace(out, TraceKind::Proposed, view, seq, Some(d));
        self.progress(seq, out);
    }

    fn in_window(&self, seq: Seq) -> bool {
        seq > self.low && seq <= self.low + self.cfg.log_capacity
    }

    fn on_pre_prepare(
        &mut self,
        view: View,
        seq: Seq,
        sender: NodeId,
        pp: PrePrepareBody,
        auths: Vec<AuthEntry>,
        out: &mut ProtocolOutput,
    ) {
        if view != self.view
            || self.changing.is_some()
            || sender != self.cfg.primary(view)
            || !self.in_window(seq)
        {
            return;
        }
        if pp.batch.is_empty() || pp.batch.len() > self.cfg.batch_size {
            return;
        }
        let d = pp.batch_digest;
        let slot = self.slots.entry(seq).or_default();
        if slot.decided.is_some() {
            return;
        }
        if let Some(p) = &slot.proposal {
            if p.view == view {
                if p.digest != d {
                    let ev = Equivocation {
                        view,
                        seq,
                        first: p.digest,
                        second: d,
                    };
                    slot.frozen = Some(view);
                    self.equivocations.push(ev);
                    self.trace(out, TraceKind::Equivocation, view, seq, Some(d));
                }
                return;
            }
        }
        slot.proposal = Some(Proposal {
            view,
            digest: d,
            pre_prepare: Some(vote(MessageKind::PrePrepare, view, seq, sender, d, auths)),
        });
        let mut learned = false;
        for r in &pp.batch {
            let k = r.request.key();
            if !self.already_executed(k) && !self.watched.contains_key(&k) {
                self.watched.insert(k, r.clone());
                learned = true;
            }
        }
        let slot = self.slots.get_mut(&seq).unwrap();
        let attach = self.cfg.attach_batches.then(|| pp.batch.clone());
        slot.batches.insert(d, pp.batch);
        if learned {
            self.ensure_vc_timer(out);
        }
        self.trace(out, TraceKind::PrePrepared, view, seq, Some(d));
        self.send_vote(MessageKind::Prepare, view, seq, d, attach, out);
        self.progress(seq, out);
    }

    fn send_vote(
        &mut self,
        kind: MessageKind,
        view: View,
        seq: Seq,
        d: Digest,
        batch: Option<Batch>,
        out: &mut ProtocolOutput,
    ) {
        let me = self.cfg.id;
        let slot = self.slots.entry(seq).or_default();
        let book = if kind == MessageKind::Prepare {
            &mut slot.prepares
        } else {
            slot.commit_sent = Some(view);
            &mut slot.commits
        };
        book.entry(view)
            .or_default()
            .insert(me, vote(kind, view, seq, me, d, Vec::new()));
        let body = VoteBody { digest: d, batch };
        let body = if kind == MessageKind::Prepare {
            Body::Prepare(body)
        } else {
            Body::Commit(body)
        };
        out.outbound.push(Outbound {
            to: Destination::Replicas,
            message: Message::new(view, seq, me, body),
            presealed: None,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn on_vote(
        &mut self,
        kind: MessageKind,
        view: View,
        seq: Seq,
        sender: NodeId,
        v: VoteBody,
        auths: Vec<AuthEntry>,
        out: &mut ProtocolOutput,
    ) {
        if view < self.view
            || view > self.view + VIEW_LOOKAHEAD
            || !self.in_window(seq)
            || sender >= self.cfg.n
        {
            return;
        }
        let slot = self.slots.entry(seq).or_default();
        let book = if kind == MessageKind::Prepare {
            &mut slot.prepares
        } else {
            &mut slot.commits
        };
        let votes = book.entry(view).or_default();
        if votes.contains_key(&sender) {
            return;
        }
        votes.insert(sender, vote(kind, view, seq, sender, v.digest, auths));
        if let Some(b) = v.batch {
            slot.batches.entry(v.digest).or_insert(b);
        }
        self.progress(seq, out);
    }

    /// Re-evaluates the prepared and committed predicates of `seq`, then
    /// executes whatever became ready.
    fn progress(&mut self, seq: Seq, out: &mut ProtocolOutput) {
        self.check_prepared(seq, out);
        self.check_committed(seq, out);
        self.try_execute(out);
    }

    fn check_prepared(&mut self, seq: Seq, out: &mut ProtocolOutput) {
        if self.changing.is_some() {
            return;
        }
        let view = self.view;
        let q = self.cfg.quorum();
        let primary = self.cfg.primary(view);
        let Some(slot) = self.slots.get_mut(&seq) else {
            return;
        };
        if slot.prepared.as_ref().is_some_and(|c| c.view >= view) {
            return;
        }
        let mut by_digest: BTreeMap<Digest, Vec<&DetachedEnvelope>> = BTreeMap::new();
        if let Some(p) = &slot.proposal {
            if p.view == view {
                if let Some(pp) = &p.pre_prepare {
                    by_digest.entry(p.digest).or_default().push(pp);
                }
            }
        }
        if let Some(votes) = slot.prepares.get(&view) {
            for det in votes.values() {
                if let Some(d) = voted_digest(det) {
                    let list = by_digest.entry(d).or_default();
                    if !list.iter().any(|x| x.sender == det.sender) {
                        list.push(det);
                    }
                }
            }
        }
        let Some((d, votes)) = by_digest
            .into_iter()
            .find(|(d, votes)| votes.len() >= q && slot.batches.contains_key(d))
        else {
            return;
        };
        debug_assert!(votes
            .iter()
            .all(|v| v.kind == MessageKind::Prepare || v.sender == primary));
        let cert = Certificate {
            view,
            seq,
            digest: d,
            votes: votes.into_iter().cloned().collect(),
        };
        slot.prepared = Some(cert);
        let send = slot.frozen != Some(view) && slot.commit_sent != Some(view);
        let attach = if self.cfg.attach_batches {
            slot.batches.get(&d).cloned()
        } else {
            None
        };
        self.trace(out, TraceKind::Prepared, view, seq, Some(d));
        if send {
            self.send_vote(MessageKind::Commit, view, seq, d, attach, out);
        }
    }

    fn check_committed(&mut self, seq: Seq, out: &mut ProtocolOutput) {
        let q = self.cfg.quorum();
        let Some(slot) = self.slots.get_mut(&seq) else {
            return;
        };
        if slot.decided.is_some() {
            return;
        }
        let mut found = None;
        'views: for (view, votes) in slot.commits.iter().rev() {
            let mut counts: BTreeMap<Digest, usize> = BTreeMap::new();
            for det in votes.values() {
                if let Some(d) = voted_digest(det) {
                    *counts.entry(d).or_default() += 1;
                }
            }
            for (d, c) in counts {
                if c >= q && slot.batches.contains_key(&d) {
                    found = Some((*view, d));
                    break 'views;
                }
            }
        }
        if let Some((view, d)) = found {
            slot.decided = Some((view, d));
            self.trace(out, TraceKind::Committed, view, seq, Some(d));
        }
    }

    fn try_execute(&mut self, out: &mut ProtocolOutput) {
        loop {
            let s = self.last_executed + 1;
            let Some(slot) = self.slots.get(&s) else {
                return;
            };
            let Some((view, d)) = slot.decided else {
                return;
            };
            let Some(batch) = slot.batches.get(&d).cloned() else {
                return;
            };
            self.execute(s, view, d, batch, out);
        }
    }

    fn execute(&mut self, seq: Seq, view: View, d: Digest, batch: Batch, out: &mut ProtocolOutput) {
        for r in &batch {
            let key = r.request.key();
            self.in_flight.remove(&key);
            if self.already_executed(key) {
                continue;
            }
            let reply = ReplyBody {
                client_id: key.client,
                request_id: key.id,
                batch_seq: seq,
                result: r.request.digest(),
            };
            out.outbound.push(self.reply_message(&reply));
            self.replies.insert(key.client, reply);
            let done: Vec<RequestKey> = self
                .watched
                .range(
                    RequestKey {
                        client: key.client,
                        id: 0,
                    }..=key,
                )
                .map(|(k, _)| *k)
                .collect();
            for k in done {
                self.watched.remove(&k);
            }
        }
        let mut h = Hasher::new();
        h.update(&self.chain.0)
            .update(&seq.to_le_bytes())
            .update(&d.0);
        self.chain = h.finish();
        self.last_executed = seq;
        self.trace(out, TraceKind::Executed, view, seq, Some(d));
        out.commits.push(Committed {
            seq,
            view,
            digest: d,
            batch,
        });
        if self.changing.is_none() {
            self.vc_attempts = 0;
            self.cancel_timer(TimerKind::ViewChange, out);
            if !self.watched.is_empty() {
                self.ensure_vc_timer(out);
            }
        }
        if seq.is_multiple_of(self.cfg.checkpoint_interval) {
            self.send_checkpoint(seq, out);
        }
    }

    // ---- checkpoints ----

    fn send_checkpoint(&mut self, seq: Seq, out: &mut ProtocolOutput) {
        let state = self.state_digest();
        let me = self.cfg.id;
        self.own_checkpoints.insert(seq, state);
        self.checkpoints.entry(seq).or_default().insert(
            me,
            vote(
                MessageKind::Checkpoint,
                self.view,
                seq,
                me,
                state,
                Vec::new(),
            ),
        );
        out.outbound.push(Outbound {
            to: Destination::Replicas,
            message: Message::new(
                self.view,
                seq,
                me,
                Body::Checkpoint(CheckpointBody {
                    state_digest: state,
                }),
            ),
            presealed: None,
        });
        self.trace(out, TraceKind::CheckpointSent, self.view, seq, Some(state));
        self.check_stable(seq, out);
    }

    fn on_checkpoint(
        &mut self,
        view: View,
        seq: Seq,
        sender: NodeId,
        c: CheckpointBody,
        auths: Vec<AuthEntry>,
        out: &mut ProtocolOutput,
    ) {
        if !self.in_window(seq) || sender >= self.cfg.n {
            return;
        }
        self.checkpoints
            .entry(seq)
            .or_default()
            .entry(sender)
            .or_insert_with(|| {
                vote(
                    MessageKind::Checkpoint,
                    view,
                    seq,
                    sender,
                    c.state_digest,
                    auths,
                )
            });
        self.check_stable(seq, out);
    }

    fn check_stable(&mut self, seq: Seq, out: &mut ProtocolOutput) {
        let q = self.cfg.quorum();
        let Some(votes) = self.checkpoints.get(&seq) else {
            return;
        };
        let Some(own) = self.own_checkpoints.get(&seq) else {
            let mut counts: BTreeMap<Digest, usize> = BTreeMap::new();
            for det in votes.values() {
                if let Some(d) = voted_digest(det) {
                    *counts.entry(d).or_default() += 1;
                }
            }
            if counts.values().any(|&c| c >= q) && seq > self.last_executed && !self.lagging {
                self.lagging = true;
                self.trace(out, TraceKind::Lagging, self.view, seq, None);
            }
            return;
        };
        let matching: Vec<DetachedEnvelope> = votes
            .values()
            .filter(|det| voted_digest(det) == Some(*own))
            .cloned()
            .collect();
        if matching.len() >= q {
            let proof = Certificate {
                view: 0,
                seq,
                digest: *own,
                votes: matching,
            };
            self.stabilize(proof, out);
        }
    }

    fn stabilize(&mut self, proof: Certificate, out: &mut ProtocolOutput) {
        let seq = proof.seq;
        if seq <= self.low {
            return;
        }
        self.low = seq;
        self.trace(
            out,
            TraceKind::CheckpointStable,
            self.view,
            seq,
            Some(proof.digest),
        );
        self.stable_proof = proof;
        self.slots = self.slots.split_off(&(seq + 1));
        self.checkpoints = self.checkpoints.split_off(&(seq + 1));
        self.own_checkpoints = self.own_checkpoints.split_off(&seq);
        if self.next_seq <= seq {
            self.next_seq = seq + 1;
        }
        self.try_propose(false, out);
    }

    // ---- view change ----

    fn start_view_change(&mut self, target: View, out: &mut ProtocolOutput) {
        if target <= self.view || self.changing.is_some_and(|p| p >= target) {
            return;
        }
        self.changing = Some(target);
        self.vc_attempts += 1;
        self.cancel_timer(TimerKind::Batch, out);
        let mut prepared = Vec::new();
        let mut batches = Vec::new();
        for (seq, slot) in self.slots.range(self.low + 1..) {
            if let Some(cert) = &slot.prepared {
                if let Some(b) = slot.batches.get(&cert.digest) {
                    debug_assert_eq!(cert.seq, *seq);
                    prepared.push(cert.clone());
                    batches.push(b.clone());
                }
            }
        }
        let body = ViewChangeBody {
            new_view: target,
            last_stable_seq: self.low,
            checkpoint_proof: self.stable_proof.clone(),
            prepared,
            batches,
        };
        let msg = Message::new(target, 0, self.cfg.id, Body::ViewChange(body.clone()));
        let detached = msg.detach(Vec::new());
        out.outbound.push(Outbound {
            to: Destination::Replicas,
            message: msg,
            presealed: None,
        });
        self.trace(out, TraceKind::ViewChangeStarted, target, self.low, None);
        self.view_changes
            .entry(target)
            .or_default()
            .insert(self.cfg.id, StoredViewChange { body, detached });
        self.cancel_timer(TimerKind::ViewChange, out);
        let after = self.vc_timeout();
        self.set_timer(TimerKind::ViewChange, after, out);
        self.maybe_send_new_view(target, out);
    }

    fn valid_checkpoint_proof(&self, seq: Seq, proof: &Certificate) -> bool {
        if seq == 0 {
            return true;
        }
        if proof.seq != seq {
            return false;
        }
        let senders: BTreeSet<NodeId> = proof
            .votes
            .iter()
            .filter(|v| {
                v.kind == MessageKind::Checkpoint
                    && v.seq == seq
                    && v.sender < self.cfg.n
                    && voted_digest(v) == Some(proof.digest)
            })
            .map(|v| v.sender)
            .collect();
        senders.len() >= self.cfg.quorum()
    }

    fn valid_prepare_certificate(&self, cert: &Certificate) -> bool {
        let primary = self.cfg.primary(cert.view);
        let senders: BTreeSet<NodeId> = cert
            .votes
            .iter()
            .filter(|v| {
                v.view == cert.view
                    && v.seq == cert.seq
                    && v.sender < self.cfg.n
                    && voted_digest(v) == Some(cert.digest)
                    && (v.kind == MessageKind::Prepare
                        || (v.kind == MessageKind::PrePrepare && v.sender == primary))
            })
            .map(|v| v.sender)
            .collect();
        senders.len() >= self.cfg.quorum()
    }

    /// Structural checks; signatures were checked before delivery.
    fn valid_view_change(&self, vc: &ViewChangeBody, with_batches: bool) -> bool {
        if !self.valid_checkpoint_proof(vc.last_stable_seq, &vc.checkpoint_proof) {
            return false;
        }
        if with_batches && vc.batches.len() != vc.prepared.len() {
            return false;
        }
        let mut seqs = BTreeSet::new();
        vc.prepared.iter().all(|c| {
            c.seq > vc.last_stable_seq
                && c.seq <= vc.last_stable_seq + self.cfg.log_capacity
                && c.view < vc.new_view
                && seqs.insert(c.seq)
                && self.valid_prepare_certificate(c)
        })
    }

    fn on_view_change(
        &mut self,
        sender: NodeId,
        body: ViewChangeBody,
        detached: DetachedEnvelope,
        out: &mut ProtocolOutput,
    ) {
        let target = body.new_view;
        if target <= self.view || sender >= self.cfg.n || !self.valid_view_change(&body, true) {
            return;
        }
        self.view_changes
            .entry(target)
            .or_default()
            .entry(sender)
            .or_insert(StoredViewChange { body, detached });

        // join once f+1 replicas want a view above ours
        let floor = self.changing.unwrap_or(self.view);
        let mut senders = BTreeSet::new();
        let mut smallest = None;
        for (v, set) in self.view_changes.range(floor + 1..) {
            smallest.get_or_insert(*v);
            senders.extend(set.keys().copied());
        }
        if senders.len() > self.cfg.f as usize {
            if let Some(v) = smallest {
                self.start_view_change(v, out);
            }
        }
        self.maybe_send_new_view(target, out);
    }

    fn maybe_send_new_view(&mut self, target: View, out: &mut ProtocolOutput) {
        if self.cfg.primary(target) != self.cfg.id || self.changing != Some(target) {
            return;
        }
        let q = self.cfg.quorum();
        let Some(set) = self.view_changes.get(&target) else {
            return;
        };
        if set.len() < q {
            return;
        }
        let chosen: Vec<&StoredViewChange> = set.values().take(q).collect();
        let bodies: Vec<&ViewChangeBody> = chosen.iter().map(|s| &s.body).collect();
        let (min_s, o) = compute_o(&bodies);
        let o: Vec<(Seq, PrePrepareBody)> = o
            .into_iter()
            .map(|(s, d, batch)| {
                let pp = match batch {
                    Some(b) => PrePrepareBody {
                        batch: b.clone(),
                        batch_digest: d,
                    },
                    None => PrePrepareBody::noop(),
                };
                (s, pp)
            })
            .collect();
        let checkpoint = best_checkpoint(&bodies);
        let nv = NewViewBody {
            view: target,
            proof: chosen.iter().map(|s| s.detached.clone()).collect(),
            o: o.clone(),
        };
        out.outbound.push(Outbound {
            to: Destination::Replicas,
            message: Message::new(target, 0, self.cfg.id, Body::NewView(nv)),
            presealed: None,
        });
        self.trace(out, TraceKind::NewViewSent, target, min_s, None);
        self.install_view(target, min_s, checkpoint, o, out);
    }

    fn on_new_view(&mut self, sender: NodeId, nv: NewViewBody, out: &mut ProtocolOutput) {
        let target = nv.view;
        if target <= self.view || sender != self.cfg.primary(target) {
            return;
        }
        let q = self.cfg.quorum();
        let senders: BTreeSet<NodeId> = nv.proof.iter().map(|p| p.sender).collect();
        let mut bodies = Vec::with_capacity(nv.proof.len());
        let mut ok = nv.proof.len() == q && senders.len() == q;
        for p in &nv.proof {
            if !ok {
                break;
            }
            match ViewChangeBody::decode_core(&p.core) {
                Ok(b)
                    if p.kind == MessageKind::ViewChange
                        && b.new_view == target
                        && p.view == target =>
                {
                    ok = self.valid_view_change(&b, false);
                    bodies.push(b);
                }
                _ => ok = false,
            }
        }
        if !ok {
            self.trace(out, TraceKind::NewViewRejected, target, 0, None);
            return;
        }
        let refs: Vec<&ViewChangeBody> = bodies.iter().collect();
        let (min_s, expected) = compute_o(&refs);
        let matches = expected.len() == nv.o.len()
            && expected
                .iter()
                .zip(&nv.o)
                .all(|((s, d, _), (s2, pp))| s == s2 && *d == pp.batch_digest);
        if !matches {
            self.trace(out, TraceKind::NewViewRejected, target, min_s, None);
            self.start_view_change(target + 1, out);
            return;
        }
        let checkpoint = best_checkpoint(&refs);
        self.install_view(target, min_s, checkpoint, nv.o, out);
    }

    fn install_view(
        &mut self,
        target: View,
        min_s: Seq,
        checkpoint: Certificate,
        o: Vec<(Seq, PrePrepareBody)>,
        out: &mut ProtocolOutput,
    ) {
        self.view = target;
        self.changing = None;
        self.deferred = false;
        self.pending.clear();
        self.pending_keys.clear();
        self.view_changes = self.view_changes.split_off(&(target + 1));
        if min_s > self.low {
            if self.last_executed < min_s {
                self.lagging = true;
                self.trace(out, TraceKind::Lagging, target, min_s, None);
            }
            self.stabilize(checkpoint, out);
        }
        for slot in self.slots.values_mut() {
            slot.prepares = slot.prepares.split_off(&target);
            slot.commits = slot.commits.split_off(&target);
            if slot.proposal.as_ref().is_some_and(|p| p.view < target) {
                slot.proposal = None;
            }
            slot.frozen = None;
        }
        let mut max_seq = min_s.max(self.low);
        let mut reproposed = BTreeSet::new();
        for (seq, pp) in o {
            if seq <= self.low {
                continue;
            }
            max_seq = max_seq.max(seq);
            for r in &pp.batch {
                reproposed.insert(r.request.key());
            }
            let attach =
                (self.cfg.attach_batches && !pp.batch.is_empty()).then(|| pp.batch.clone());
            let slot = self.slots.entry(seq).or_default();
            slot.batches.entry(pp.batch_digest).or_insert(pp.batch);
            slot.proposal = Some(Proposal {
                view: target,
                digest: pp.batch_digest,
                pre_prepare: None,
            });
            self.send_vote(
                MessageKind::Prepare,
                target,
                seq,
                pp.batch_digest,
                attach,
                out,
            );
        }
        self.next_seq = max_seq + 1;
        self.in_flight = reproposed;
        self.cancel_timer(TimerKind::Batch, out);
        self.cancel_timer(TimerKind::ViewChange, out);
        if !self.watched.is_empty() {
            self.ensure_vc_timer(out);
        }
        self.trace(out, TraceKind::NewViewInstalled, target, max_seq, None);
        if self.is_primary() {
            let leftover: Vec<SignedRequest> = self
                .watched
                .iter()
                .filter(|(k, _)| !self.in_flight.contains(k))
                .map(|(_, r)| r.clone())
                .collect();
            for r in leftover {
                self.pending_keys.insert(r.request.key());
                self.pending.push_back(r);
            }
        }
        let seqs: Vec<Seq> = self.slots.keys().copied().collect();
        for s in seqs {
            self.check_prepared(s, out);
            self.check_committed(s, out);
        }
        self.try_execute(out);
        self.try_propose(true, out);
    }
}

/// `(seq, digest, batch)` for one slot of O; `None` when no view change
/// carried the batch.
pub type Reproposal<'a> = (Seq, Digest, Option<&'a Batch>);

/// The stable checkpoint and re-proposals implied by a set of view
/// changes: for every seq above the highest stable checkpoint up to the
/// highest prepared seq, the highest-view prepared digest (ties broken by
/// the smaller digest) or the no-op batch.
pub fn compute_o<'a>(vcs: &[&'a ViewChangeBody]) -> (Seq, Vec<Reproposal<'a>>) {
    let min_s = vcs.iter().map(|v| v.last_stable_seq).max().unwrap_or(0);
    let mut best: BTreeMap<Seq, (View, Digest, Option<&'a Batch>)> = BTreeMap::new();
    for vc in vcs {
        for (i, cert) in vc.prepared.iter().enumerate() {
            if cert.seq <= min_s {
                continue;
            }
            let cand = (cert.view, cert.digest, vc.batches.get(i));
            match best.get(&cert.seq) {
                Some((v, d, _))
                    if (*v, std::cmp::Reverse(*d)) >= (cand.0, std::cmp::Reverse(cand.1)) => {}
                _ => {
                    best.insert(cert.seq, cand);
                }
            }
        }
    }
    let max_s = best.keys().next_back().copied().unwrap_or(min_s);
    let o = (min_s + 1..=max_s)
        .map(|s| match best.get(&s) {
            Some((_, d, b)) => (s, *d, *b),
            None => (s, noop_digest(), None),
        })
        .collect();
    (min_s, o)
}

fn best_checkpoint(vcs: &[&ViewChangeBody]) -> Certificate {
    vcs.iter()
        .max_by_key(|v| v.last_stable_seq)
        .map(|v| v.checkpoint_proof.clone())
        .unwrap_or_default()
}
