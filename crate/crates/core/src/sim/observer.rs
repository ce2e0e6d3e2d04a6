use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use crate::crypto::{Digest, KeyStore};
use crate::message::{NewViewBody, Request, ViewChangeBody};
use crate::replica::Committed;
use crate::wire::{NodeId, Seq, View};

use super::ADVERSARY;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    /// Two correct replicas committed different batches at one sequence.
    Agreement {
        seq: Seq,
        first: NodeId,
        first_digest: String,
        second: NodeId,
        second_digest: String,
    },
    /// A committed request no client submitted.
    Validity {
        node: NodeId,
        seq: Seq,
        client: NodeId,
        request_id: u64,
    },
    /// Execution skipped or repeated a sequence number.
    Gap {
        node: NodeId,
        expected: Seq,
        got: Seq,
    },
    /// A new view omitted or replaced a batch committed in an earlier view.
    ViewChange {
        view: View,
        seq: Seq,
        committed: String,
    },
    /// A client accepted a result that does not match its request.
    Reply { client: NodeId, request_id: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Agreement {
                seq,
                first,
                first_digest,
                second,
                second_digest,
            } => write!(
                f,
                "agreement: seq {seq} committed as {first_digest} at {first} and {second_digest} at {second}"
            ),
            Violation::Validity {
                node,
                seq,
                client,
                request_id,
            } => write!(f, "validity: replica {node} committed unsubmitted request {client}/{request_id} at seq {seq}"),
            Violation::Gap { node, expected, got } => {
                write!(f, "order: replica {node} executed seq {got}, expected {expected}")
            }
            Violation::ViewChange { view, seq, committed } => {
                write!(f, "view change: new view {view} lost committed batch {committed} at seq {seq}")
            }
            Violation::Reply { client, request_id } => {
                write!(f, "reply: client {client} accepted a wrong result for request {request_id}")
            }
        }
    }
}

struct NewViewRecord {
    view: View,
    min_s: Seq,
    o: BTreeMap<Seq, Digest>,
}

/// Checks agreement, validity and view-change safety as events happen.
pub struct Observer {
    correct: Vec<bool>,
    keys: KeyStore,
    decided: BTreeMap<Seq, (NodeId, Digest)>,
    committed: Vec<BTreeMap<Seq, (View, Digest)>>,
    next: Vec<Seq>,
    submitted: HashMap<(NodeId, u64), Digest>,
    validated: HashSet<Digest>,
    new_views: Vec<NewViewRecord>,
    violations: Vec<Violation>,
}

impl Observer {
    /// `keys` only needs verifying keys for the adversary client.
    pub fn new(correct: Vec<bool>, keys: KeyStore) -> Self {
        let n = correct.len();
        Observer {
            correct,
            keys,
            decided: BTreeMap::new(),
            committed: vec![BTreeMap::new(); n],
            next: vec![1; n],
            submitted: HashMap::new(),
            validated: HashSet::new(),
            new_views: Vec::new(),
            violations: Vec::new(),
        }
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    fn is_correct(&self, node: NodeId) -> bool {
        self.correct.get(node as usize).copied().unwrap_or(false)
    }

    pub fn on_submit(&mut self, request: &Request) {
        self.submitted
            .insert((request.client_id, request.request_id), request.digest());
    }

    pub fn on_completion(&mut self, client: NodeId, request_id: u64, result: Digest) {
        if self.submitted.get(&(client, request_id)) != Some(&result) {
            self.violations
                .push(Violation::Reply { client, request_id });
        }
    }

    /// Returns the violations this commit caused.
    pub fn on_commit(&mut self, node: NodeId, c: &Committed) -> usize {
        if !self.is_correct(node) {
            return 0;
        }
        let before = self.violations.len();
        let expected = self.next[node as usize];
        if c.seq != expected {
            self.violations.push(Violation::Gap {
                node,
                expected,
                got: c.seq,
            });
        }
        self.next[node as usize] = c.seq + 1;
        match self.decided.get(&c.seq) {
            Some(&(first, d)) if d != c.digest => self.violations.push(Violation::Agreement {
                seq: c.seq,
                first,
                first_digest: d.to_hex(),
                second: node,
                second_digest: c.digest.to_hex(),
            }),
            Some(_) => {}
            None => {
                self.decided.insert(c.seq, (node, c.digest));
            }
        }
        if !self.validated.contains(&c.digest) {
            let mut ok = true;
            for sr in &c.batch {
                let r = &sr.request;
                let valid = if r.client_id == ADVERSARY {
                    self.keys
                        .verify_signature(ADVERSARY, &r.auth_digest(), &sr.signature)
                } else {
                    self.submitted.get(&(r.client_id, r.request_id)) == Some(&r.digest())
                };
                if !valid {
                    ok = false;
                    self.violations.push(Violation::Validity {
                        node,
                        seq: c.seq,
                        client: r.client_id,
                        request_id: r.request_id,
                    });
                }
            }
            if ok {
                self.validated.insert(c.digest);
            }
        }
        for nv in &self.new_views {
            if c.view < nv.view && c.seq > nv.min_s && nv.o.get(&c.seq) != Some(&c.digest) {
                self.violations.push(Violation::ViewChange {
                    view: nv.view,
                    seq: c.seq,
                    committed: c.digest.to_hex(),
                });
            }
        }
        self.committed[node as usize].insert(c.seq, (c.view, c.digest));
        self.violations.len() - before
    }

    /// Every batch committed before `nv.view` above the proof's stable
    /// checkpoint must reappear in O with the same digest.
    pub fn on_new_view(&mut self, sender: NodeId, nv: &NewViewBody) -> usize {
        if !self.is_correct(sender) {
            return 0;
        }
        let before = self.violations.len();
        let min_s = nv
            .proof
            .iter()
            .filter_map(|p| ViewChangeBody::decode_core(&p.core).ok())
            .map(|vc| vc.last_stable_seq)
            .max()
            .unwrap_or(0);
        let o: BTreeMap<Seq, Digest> = nv.o.iter().map(|(s, pp)| (*s, pp.batch_digest)).collect();
        for log in &self.committed {
            for (&seq, &(view, d)) in log.range(min_s + 1..) {
                if view < nv.view && o.get(&seq) != Some(&d) {
                    self.violations.push(Violation::ViewChange {
                        view: nv.view,
                        seq,
                        committed: d.to_hex(),
                    });
                }
            }
        }
        self.new_views.push(NewViewRecord {
            view: nv.view,
            min_s,
            o,
        });
        self.violations.len() - before
    }
}
