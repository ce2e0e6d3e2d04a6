use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use pbft_core::wire::MessageKind;

/// Pipeline stages in processing order. `Clone` is counted but not timed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Unmarshal,
    HashRx,
    Verify,
    Decide,
    HashTx,
    Clone,
    SignMac,
    Marshal,
}

impl Stage {
    pub const TIMED: [Stage; 7] = [
        Stage::Unmarshal,
        Stage::HashRx,
        Stage::Verify,
        Stage::Decide,
        Stage::HashTx,
        Stage::SignMac,
        Stage::Marshal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Unmarshal => "unmarshal",
            Stage::HashRx => "hash_rx",
            Stage::Verify => "verify",
            Stage::Decide => "decide",
            Stage::HashTx => "hash_tx",
            Stage::Clone => "clone",
            Stage::SignMac => "sign_mac",
            Stage::Marshal => "marshal",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageCost {
    pub count: u64,
    pub total_ns: u64,
}

impl StageCost {
    pub fn mean_ns(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total_ns as f64 / self.count as f64
        }
    }
}

/// Per (stage, message kind) time totals. Appends come from every worker.
#[derive(Debug)]
pub struct StageMetrics {
    enabled: bool,
    table: Mutex<BTreeMap<(Stage, MessageKind), StageCost>>,
}

impl StageMetrics {
    pub fn new(enabled: bool) -> Self {
        StageMetrics {
            enabled,
            table: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&self, stage: Stage, kind: MessageKind, ns: u64) {
        if !self.enabled {
            return;
        }
        let mut t = self.table.lock().unwrap_or_else(|e| e.into_inner());
        let c = t.entry((stage, kind)).or_default();
        c.count += 1;
        c.total_ns += ns;
    }

    /// Times `f` and records it under `stage`.
    pub fn time<T>(&self, stage: Stage, kind: MessageKind, f: impl FnOnce() -> T) -> T {
        if !self.enabled {
            return f();
        }
        let t = Instant::now();
        let out = f();
        self.record(stage, kind, t.elapsed().as_nanos() as u64);
        out
    }

    pub fn get(&self, stage: Stage, kind: MessageKind) -> StageCost {
        self.table
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(&(stage, kind))
            .copied()
            .unwrap_or_default()
    }

    pub fn snapshot(&self) -> BTreeMap<(Stage, MessageKind), StageCost> {
        self.table.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn merge(&self, other: &StageMetrics) {
        let theirs = other.snapshot();
        let mut t = self.table.lock().unwrap_or_else(|e| e.into_inner());
        for (k, c) in theirs {
            let e = t.entry(k).or_default();
            e.count += c.count;
            e.total_ns += c.total_ns;
        }
    }

    /// `stage,kind,count,total_ns,mean_ns`, one row per observed pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,kind,count,total_ns,mean_ns\n");
        for ((stage, kind), c) in self.snapshot() {
            if stage == Stage::Clone {
                continue;
            }
            let _ = writeln!(
                out,
                "{},{},{},{},{:.1}",
                stage.as_str(),
                kind,
                c.count,
                c.total_ns,
                c.mean_ns()
            );
        }
        out
    }
}

/// Item counters used for the conservation and fan-out checks.
#[derive(Debug, Default)]
pub struct Counters {
    /// Frames that failed to decode in stage 1.
    pub malformed: AtomicU64,
    pub verify_in: AtomicU64,
    pub rejected: AtomicU64,
    /// Verified items handed to the replica.
    pub decided: AtomicU64,
    /// Sum of destination-set sizes over every stage-3 output.
    pub destinations: AtomicU64,
    pub cloned: AtomicU64,
    pub macs: AtomicU64,
    pub signatures: AtomicU64,
    pub marshaled: AtomicU64,
    /// PRE_PREPAREs this node proposed.
    pub pre_prepares: AtomicU64,
    pub committed_batches: AtomicU64,
    pub committed_requests: AtomicU64,
}

impl Counters {
    pub fn load(c: &AtomicU64) -> u64 {
        c.load(Ordering::Relaxed)
    }

    pub(crate) fn add(c: &AtomicU64, n: u64) {
        c.fetch_add(n, Ordering::Relaxed);
    }
}
