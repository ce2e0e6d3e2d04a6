use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::crypto::{CryptoMode, Digest};
use crate::message::{Batch, Message, SignedRequest};
use crate::wire::{AuthEntry, NodeId, Seq, View};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplicaConfig {
    pub n: u16,
    pub f: u16,
    pub id: NodeId,
    pub mode: CryptoMode,
    pub batch_size: usize,
    pub batch_timeout: Duration,
    pub checkpoint_interval: u64,
    pub log_capacity: u64,
    pub view_change_timeout: Duration,
    /// Attach the batch to PREPARE and COMMIT votes. Replicas that missed
    /// the proposal then commit from the attached copy.
    pub attach_batches: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("n = {n} cannot tolerate f = {f} faults (need n >= 3f + 1)")]
    TooFewReplicas { n: u16, f: u16 },
    #[error("replica id {id} outside group of {n}")]
    BadId { id: NodeId, n: u16 },
    #[error("checkpoint interval {interval} must be below log capacity {capacity}")]
    Window { interval: u64, capacity: u64 },
    #[error("{0} must be at least 1")]
    Zero(&'static str),
}

impl ReplicaConfig {
    /// Defaults for a group of `n`, tolerating the largest possible `f`.
    pub fn new(n: u16, id: NodeId, mode: CryptoMode) -> Self {
        ReplicaConfig {
            n,
            f: n.saturating_sub(1) / 3,
            id,
            mode,
            batch_size: 1,
            batch_timeout: Duration::from_millis(2),
            checkpoint_interval: 500,
            log_capacity: 10_000,
            view_change_timeout: Duration::from_millis(500),
            attach_batches: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 3 * self.f + 1 || self.n == 0 {
            return Err(ConfigError::TooFewReplicas {
                n: self.n,
                f: self.f,
            });
        }
        if self.id >= self.n {
            return Err(ConfigError::BadId {
                id: self.id,
                n: self.n,
            });
        }
        if self.checkpoint_interval == 0 {
            return Err(ConfigError::Zero("checkpoint_interval"));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Zero("batch_size"));
        }
        if self.checkpoint_interval >= self.log_capacity {
            return Err(ConfigError::Window {
                interval: self.checkpoint_interval,
                capacity: self.log_capacity,
            });
        }
        Ok(())
    }

    pub fn quorum(&self) -> usize {
        2 * self.f as usize + 1
    }

    pub fn primary(&self, view: View) -> NodeId {
        primary(view, self.n)
    }
}

pub fn primary(view: View, n: u16) -> NodeId {
    (view % n as u64) as NodeId
}

/// A verified message together with the authenticators it arrived with.
#[derive(Clone, Debug)]
pub struct Inbound {
    pub message: Message,
    pub auths: Vec<AuthEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerKind {
    Batch,
    ViewChange,
}

#[derive(Clone, Debug)]
pub enum Event {
    Deliver(Inbound),
    /// A client request whose signature the caller already checked.
    Request(SignedRequest),
    Timeout {
        timer: TimerKind,
        generation: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Destination {
    /// Every replica except the sender.
    Replicas,
    Replica(NodeId),
    Client(NodeId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outbound {
    pub to: Destination,
    pub message: Message,
    /// Authenticators to send verbatim (forwarded client requests).
    pub presealed: Option<Vec<AuthEntry>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimerCommand {
    Set {
        timer: TimerKind,
        generation: u64,
        after: Duration,
    },
    Cancel {
        timer: TimerKind,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Committed {
    pub seq: Seq,
    pub view: View,
    pub digest: Digest,
    pub batch: Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Proposed,
    PrePrepared,
    Prepared,
    Committed,
    Executed,
    CheckpointSent,
    CheckpointStable,
    Equivocation,
    Deferred,
    ViewChangeStarted,
    NewViewSent,
    NewViewInstalled,
    NewViewRejected,
    Lagging,
}

/// One structured record per state transition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub kind: TraceKind,
    pub view: View,
    pub seq: Seq,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "hex_digest")]
    pub digest: Option<Digest>,
}

fn hex_digest<S: serde::Serializer>(d: &Option<Digest>, s: S) -> Result<S::Ok, S::Error> {
    match d {
        Some(d) => s.serialize_str(&d.to_hex()),
        None => s.serialize_none(),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProtocolOutput {
    pub outbound: Vec<Outbound>,
    /// Newly executed batches, contiguous and increasing in seq.
    pub commits: Vec<Committed>,
    pub timers: Vec<TimerCommand>,
    pub trace: Vec<TraceRecord>,
}

impl ProtocolOutput {
    pub fn is_empty(&self) -> bool {
        self.outbound.is_empty() && self.commits.is_empty() && self.timers.is_empty()
    }

    pub fn sent(&self) -> impl Iterator<Item = &Message> {
        self.outbound.iter().map(|o| &o.message)
    }
}

/// Evidence of a primary proposing two batches for one slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Equivocation {
    pub view: View,
    pub seq: Seq,
    pub first: Digest,
    pub second: Digest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    PrePrepared,
    Prepared,
    Committed,
}
