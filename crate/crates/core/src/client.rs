//! Client sessions: sign requests, collect `f + 1` matching replies,
//! retransmit on timeout.
//!
//! Like the replica, a session is sans-IO: every call returns the actions
//! the caller must carry out, and time is passed in.

use std::collections::BTreeMap;
use std::time::Duration;

use thiserror::Error;

use crate::crypto::{
    verify_incoming, CryptoError, CryptoMode, Digest, KeyStore, RejectReason, Verdict,
};
use crate::message::{Body, Message, Request, SignedRequest};
use crate::replica::primary;
use crate::wire::{AuthEntry, NodeId, View, WireEnvelope, SIGNATURE_SLOT};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientConfig {
    pub n: u16,
    pub f: u16,
    pub mode: CryptoMode,
    pub request_timeout: Duration,
    pub max_retransmits: u32,
}

impl ClientConfig {
    pub fn new(n: u16, mode: CryptoMode) -> Self {
        ClientConfig {
            n,
            f: n.saturating_sub(1) / 3,
            mode,
            request_timeout: Duration::from_secs(1),
            max_retransmits: 8,
        }
    }

    pub fn reply_quorum(&self) -> usize {
        self.f as usize + 1
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request {0} failed after exhausting retransmissions")]
    RequestFailed(u64),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Replica(NodeId),
    AllReplicas,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub request_id: u64,
    pub result: Digest,
    pub batch_seq: u64,
    pub latency: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClientAction {
    Send {
        to: Target,
        envelope: WireEnvelope,
    },
    /// Call [`ClientSession::on_timeout`] with `request_id` after `after`.
    SetTimer {
        request_id: u64,
        after: Duration,
    },
    Complete(Completion),
    Failed(u64),
}

#[derive(Debug)]
struct Pending {
    envelope: WireEnvelope,
    sent_at: Duration,
    replies: BTreeMap<NodeId, Digest>,
    retransmits: u32,
}

#[derive(Debug)]
pub struct ClientSession {
    cfg: ClientConfig,
    keys: KeyStore,
    next_id: u64,
    pending: BTreeMap<u64, Pending>,
    view: View,
    leader_suspect: bool,
    rejected: u64,
}

impl ClientSession {
    pub fn new(cfg: ClientConfig, keys: KeyStore) -> Self {
        ClientSession {
            cfg,
            keys,
            next_id: 1,
            pending: BTreeMap::new(),
            view: 0,
            leader_suspect: false,
            rejected: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.keys.id()
    }

    pub fn believed_leader(&self) -> NodeId {
        primary(self.view, self.cfg.n)
    }

    pub fn outstanding(&self) -> usize {
        self.pending.len()
    }

    pub fn rejected_replies(&self) -> u64 {
        self.rejected
    }

    /// Assigns the next request id and signs, without sending.
    pub fn prepare(&mut self, payload: Vec<u8>) -> Result<SignedRequest, ClientError> {
        let request = Request::new(self.id(), self.next_id, payload);
        let signature = self.keys.sign(&request.auth_digest())?;
        self.next_id += 1;
        Ok(SignedRequest { request, signature })
    }

    pub fn submit(
        &mut self,
        payload: Vec<u8>,
        now: Duration,
    ) -> Result<(u64, Vec<ClientAction>), ClientError> {
        let sr = self.prepare(payload)?;
        let id = sr.request.request_id;
        Ok((id, self.submit_prepared(sr, now)))
    }

    /// Sends a request produced by [`prepare`](Self::prepare).
    pub fn submit_prepared(&mut self, sr: SignedRequest, now: Duration) -> Vec<ClientAction> {
        let id = sr.request.request_id;
        let mut envelope = sr.request.envelope();
        envelope.auths = vec![AuthEntry {
            recipient: SIGNATURE_SLOT,
            bytes: sr.signature,
        }];
        let to = if self.leader_suspect {
            Target::AllReplicas
        } else {
            Target::Replica(self.believed_leader())
        };
        let actions = vec![
            ClientAction::Send {
                to,
                envelope: envelope.clone(),
            },
            ClientAction::SetTimer {
                request_id: id,
                after: self.cfg.request_timeout,
            },
        ];
        self.pending.insert(
            id,
            Pending {
                envelope,
                sent_at: now,
                replies: BTreeMap::new(),
                retransmits: 0,
            },
        );
        actions
    }

    /// Policy and integrity check of a reply addressed to this client.
    pub fn verify_reply(&self, env: &WireEnvelope) -> Verdict {
        if env.sender >= self.cfg.n {
            return Verdict::Reject(RejectReason::UnknownSender);
        }
        match Message::from_envelope(env) {
            Ok(Message {
                body: Body::Reply(r),
                ..
            }) if r.client_id == self.id() => verify_incoming(env, self.cfg.mode, &self.keys),
            _ => Verdict::Reject(RejectReason::Malformed),
        }
    }

    pub fn on_reply(&mut self, env: &WireEnvelope, now: Duration) -> Vec<ClientAction> {
        if !self.verify_reply(env).is_accept() {
            self.rejected += 1;
            return Vec::new();
        }
        let Ok(Message {
            body: Body::Reply(r),
            ..
        }) = Message::from_envelope(env)
        else {
            return Vec::new();
        };
        if env.view > self.view {
            self.view = env.view;
        }
        self.leader_suspect = false;
        let Some(p) = self.pending.get_mut(&r.request_id) else {
            return Vec::new();
        };
        p.replies.insert(env.sender, r.result);
        let votes = p.replies.values().filter(|d| **d == r.result).count();
        if votes < self.cfg.reply_quorum() {
            return Vec::new();
        }
        let p = self.pending.remove(&r.request_id).unwrap();
        vec![ClientAction::Complete(Completion {
            request_id: r.request_id,
            result: r.result,
            batch_seq: r.batch_seq,
            latency: now.saturating_sub(p.sent_at),
        })]
    }

    pub fn on_timeout(&mut self, request_id: u64) -> Vec<ClientAction> {
        let Some(p) = self.pending.get_mut(&request_id) else {
            return Vec::new();
        };
        if p.retransmits >= self.cfg.max_retransmits {
            self.pending.remove(&request_id);
            return vec![ClientAction::Failed(request_id)];
        }
        p.retransmits += 1;
        self.leader_suspect = true;
        vec![
            ClientAction::Send {
                to: Target::AllReplicas,
                envelope: p.envelope.clone(),
            },
            ClientAction::SetTimer {
                request_id,
                after: self.cfg.request_timeout,
            },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{seal, Keyring, SignatureAlgorithm};
    use crate::message::ReplyBody;

    const C: NodeId = 50;

    fn setup(mode: CryptoMode) -> (Keyring, ClientSession) {
        let ring = Keyring::generate(SignatureAlgorithm::Ed25519, 4, &[C], 1).unwrap();
        let s = ClientSession::new(ClientConfig::new(4, mode), ring.keystore(C).unwrap());
        (ring, s)
    }

    fn reply(
        ring: &Keyring,
        mode: CryptoMode,
        from: NodeId,
        id: u64,
        result: Digest,
    ) -> WireEnvelope {
        let m = Message::new(
            0,
            1,
            from,
            Body::Reply(ReplyBody {
                client_id: C,
                request_id: id,
                batch_seq: 1,
                result,
            }),
        );
        seal(&m, &[C], mode, &ring.keystore(from).unwrap()).unwrap()
    }

    #[test]
    fn completes_on_f_plus_one_matching() {
        let (ring, mut s) = setup(CryptoMode::MacInterNode);
        let (id, actions) = s.submit(b"x".to_vec(), Duration::ZERO).unwrap();
        assert!(matches!(
            actions[0],
            ClientAction::Send {
                to: Target::Replica(0),
                ..
            }
        ));
        let d = crate::crypto::digest(b"r");
        let mode = CryptoMode::MacInterNode;
        assert!(s
            .on_reply(&reply(&ring, mode, 0, id, d), Duration::from_millis(1))
            .is_empty());
        let done = s.on_reply(&reply(&ring, mode, 2, id, d), Duration::from_millis(3));
        assert!(
            matches!(&done[..], [ClientAction::Complete(c)] if c.latency == Duration::from_millis(3))
        );
        assert_eq!(s.outstanding(), 0);
    }

    #[test]
    fn waits_for_matching_digest() {
        let (ring, mut s) = setup(CryptoMode::MacInterNode);
        let (id, _) = s.submit(b"x".to_vec(), Duration::ZERO).unwrap();
        let (a, b) = (crate::crypto::digest(b"a"), crate::crypto::digest(b"b"));
        let mode = CryptoMode::MacInterNode;
        assert!(s
            .on_reply(&reply(&ring, mode, 0, id, a), Duration::ZERO)
            .is_empty());
        assert!(s
            .on_reply(&reply(&ring, mode, 1, id, b), Duration::ZERO)
            .is_empty());
        // the same replica twice does not make a quorum
        assert!(s
            .on_reply(&reply(&ring, mode, 1, id, b), Duration::ZERO)
            .is_empty());
        let done = s.on_reply(&reply(&ring, mode, 3, id, b), Duration::ZERO);
        assert!(matches!(&done[..], [ClientAction::Complete(c)] if c.result == b));
    }

    #[test]
    fn reply_policy_is_enforced() {
        let (ring, s) = setup(CryptoMode::DomainOptimized);
        let d = crate::crypto::digest(b"r");
        assert!(s
            .verify_reply(&reply(&ring, CryptoMode::DomainOptimized, 0, 1, d))
            .is_accept());
        let (ring, s) = setup(CryptoMode::PkOnly);
        // MAC'd reply under PK_ONLY
        assert_eq!(
            s.verify_reply(&reply(&ring, CryptoMode::DomainOptimized, 0, 1, d)),
            Verdict::Reject(RejectReason::WrongScheme)
        );
        let mut bad = reply(&ring, CryptoMode::PkOnly, 0, 1, d);
        bad.payload[12] ^= 1;
        assert!(!s.verify_reply(&bad).is_accept());
    }

    #[test]
    fn timeout_broadcasts_then_fails() {
        let (_, mut s) = setup(CryptoMode::MacInterNode);
        let (id, _) = s.submit(b"x".to_vec(), Duration::ZERO).unwrap();
        for _ in 0..8 {
            let a = s.on_timeout(id);
            assert!(matches!(
                a[0],
                ClientAction::Send {
                    to: Target::AllReplicas,
                    ..
                }
            ));
        }
        assert_eq!(s.on_timeout(id), vec![ClientAction::Failed(id)]);
        // a suspect leader means the next request goes to everyone
        let (_, a) = s.submit(b"y".to_vec(), Duration::ZERO).unwrap();
        assert!(matches!(
            a[0],
            ClientAction::Send {
                to: Target::AllReplicas,
                ..
            }
        ));
    }

    #[test]
    fn request_ids_increase() {
        let (_, mut s) = setup(CryptoMode::PkOnly);
        let a = s.prepare(vec![]).unwrap();
        let b = s.prepare(vec![]).unwrap();
        assert!(b.request.request_id > a.request.request_id);
    }
}
