use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use crate::message::{
    auth_digest_of, batch_digest, batch_digest_raw, Batch, Body, DetachedEnvelope, Message,
    SignedRequest, ViewChangeBody,
};
use crate::wire::{AuthEntry, MessageKind, NodeId, WireEnvelope, SIGNATURE_SLOT};

use super::keys::{CryptoError, KeyStore};
use super::policy::{scheme_for, AuthScheme, CryptoMode};
use super::Digest;

pub const TAG_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Authenticator {
    Signature(Vec<u8>),
    /// One tag per intended recipient.
    MacVector(Vec<(NodeId, [u8; TAG_LEN])>),
}

impl Authenticator {
    pub fn to_entries(&self) -> Vec<AuthEntry> {
        match self {
            Authenticator::Signature(s) => vec![AuthEntry {
                recipient: SIGNATURE_SLOT,
                bytes: s.clone(),
            }],
            Authenticator::MacVector(tags) => tags
                .iter()
                .map(|(r, t)| AuthEntry {
                    recipient: *r,
                    bytes: t.to_vec(),
                })
                .collect(),
        }
    }

    /// `None` when the section is empty or mixes signatures and tags.
    pub fn from_entries(entries: &[AuthEntry]) -> Option<Self> {
        match entries {
            [] => None,
            [e] if e.recipient == SIGNATURE_SLOT => Some(Authenticator::Signature(e.bytes.clone())),
            _ => {
                let mut tags = Vec::with_capacity(entries.len());
                for e in entries {
                    if e.recipient == SIGNATURE_SLOT || tags.iter().any(|(r, _)| *r == e.recipient)
                    {
                        return None;
                    }
                    tags.push((e.recipient, e.bytes.as_slice().try_into().ok()?));
                }
                Some(Authenticator::MacVector(tags))
            }
        }
    }

    pub fn scheme(&self) -> AuthScheme {
        match self {
            Authenticator::Signature(_) => AuthScheme::Signature,
            Authenticator::MacVector(_) => AuthScheme::Mac,
        }
    }
}

/// Authenticates an already computed envelope digest for `recipients`.
pub fn authenticate_digest(
    digest: &Digest,
    kind: MessageKind,
    recipients: &[NodeId],
    mode: CryptoMode,
    keys: &KeyStore,
) -> Result<Authenticator, CryptoError> {
    match scheme_for(kind, mode) {
        AuthScheme::Signature | AuthScheme::Absent => {
            Ok(Authenticator::Signature(keys.sign(digest)?))
        }
        AuthScheme::Mac => recipients
            .iter()
            .map(|r| Ok((*r, keys.mac_key(*r)?.tag(digest))))
            .collect::<Result<_, CryptoError>>()
            .map(Authenticator::MacVector),
    }
}

pub fn authenticate(
    envelope: &WireEnvelope,
    recipients: &[NodeId],
    mode: CryptoMode,
    keys: &KeyStore,
) -> Result<Authenticator, CryptoError> {
    let d = auth_digest_of(envelope).map_err(|e| CryptoError::KeyFormat(e.to_string()))?;
    authenticate_digest(&d, envelope.kind, recipients, mode, keys)
}

/// Encodes `msg` and attaches its authenticator.
pub fn seal(
    msg: &Message,
    recipients: &[NodeId],
    mode: CryptoMode,
    keys: &KeyStore,
) -> Result<WireEnvelope, CryptoError> {
    let mut env = msg.to_envelope();
    env.auths = authenticate(&env, recipients, mode, keys)?.to_entries();
    Ok(env)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    Malformed,
    BadAttachment,
    MissingAuth,
    WrongScheme,
    UnknownSender,
    BadSignature,
    BadMac,
    BadClientSignature,
    BadEmbedded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(self) -> bool {
        self == Verdict::Accept
    }
}

impl From<Result<(), RejectReason>> for Verdict {
    fn from(r: Result<(), RejectReason>) -> Self {
        match r {
            Ok(()) => Verdict::Accept,
            Err(e) => Verdict::Reject(e),
        }
    }
}

/// Receive-side hashing: checks attached batches against the digests they
/// are bound to and returns the envelope digest.
pub fn hash_incoming(env: &WireEnvelope, msg: &Message) -> Result<Digest, RejectReason> {
    match &msg.body {
        Body::PrePrepare(pp) => {
            let (d, _) =
                batch_digest_raw(&env.payload[32..]).map_err(|_| RejectReason::Malformed)?;
            if d != pp.batch_digest {
                return Err(RejectReason::BadAttachment);
            }
        }
        Body::Prepare(v) | Body::Commit(v) if v.batch.is_some() => {
            let (d, _) =
                batch_digest_raw(&env.payload[32..]).map_err(|_| RejectReason::Malformed)?;
            if d != v.digest {
                return Err(RejectReason::BadAttachment);
            }
        }
        Body::ViewChange(vc) => {
            for (cert, b) in vc.prepared.iter().zip(&vc.batches) {
                if batch_digest(b) != cert.digest {
                    return Err(RejectReason::BadAttachment);
                }
            }
        }
        Body::NewView(nv) => {
            for (_, pp) in &nv.o {
                if batch_digest(&pp.batch) != pp.batch_digest {
                    return Err(RejectReason::BadAttachment);
                }
            }
        }
        _ => {}
    }
    auth_digest_of(env).map_err(|_| RejectReason::Malformed)
}

/// Checks the authenticator of an envelope whose digest is `digest`.
pub fn verify_auth(
    env: &WireEnvelope,
    digest: &Digest,
    mode: CryptoMode,
    keys: &KeyStore,
) -> Verdict {
    check_auth(env.kind, env.sender, &env.auths, digest, mode, keys).into()
}

fn check_auth(
    kind: MessageKind,
    sender: NodeId,
    auths: &[AuthEntry],
    digest: &Digest,
    mode: CryptoMode,
    keys: &KeyStore,
) -> Result<(), RejectReason> {
    // Same acceptance rules as `Authenticator::from_entries`, without copying tags.
    let scheme = match auths {
        [] => return Err(RejectReason::MissingAuth),
        [e] if e.recipient == SIGNATURE_SLOT => AuthScheme::Signature,
        _ => {
            for (i, e) in auths.iter().enumerate() {
                if e.recipient == SIGNATURE_SLOT
                    || e.bytes.len() != TAG_LEN
                    || auths[..i].iter().any(|p| p.recipient == e.recipient)
                {
                    return Err(RejectReason::MissingAuth);
                }
            }
            AuthScheme::Mac
        }
    };
    if scheme != scheme_for(kind, mode) {
        return Err(RejectReason::WrongScheme);
    }
    if scheme == AuthScheme::Signature {
        if !keys.has_verifier(sender) {
            return Err(RejectReason::UnknownSender);
        }
        return if keys.verify_signature(sender, digest, &auths[0].bytes) {
            Ok(())
        } else {
            Err(RejectReason::BadSignature)
        };
    }
    if sender == keys.id() {
        // our own message: every tag must be ours
        for e in auths {
            let key = keys
                .mac_key(e.recipient)
                .map_err(|_| RejectReason::BadMac)?;
            if !key.verify(digest, &e.bytes) {
                return Err(RejectReason::BadMac);
            }
        }
        return Ok(());
    }
    let tag = auths
        .iter()
        .find(|e| e.recipient == keys.id())
        .ok_or(RejectReason::MissingAuth)?;
    let key = keys
        .mac_key(sender)
        .map_err(|_| RejectReason::UnknownSender)?;
    if key.verify(digest, &tag.bytes) {
        Ok(())
    } else {
        Err(RejectReason::BadMac)
    }
}

/// Full receive-side check of one envelope: attachments and authenticator.
/// Never fails loudly: Byzantine input yields `Reject`.
pub fn verify_incoming(env: &WireEnvelope, mode: CryptoMode, keys: &KeyStore) -> Verdict {
    let Ok(msg) = Message::from_envelope(env) else {
        return Verdict::Reject(RejectReason::Malformed);
    };
    match hash_incoming(env, &msg) {
        Ok(d) => verify_auth(env, &d, mode, keys),
        Err(e) => Verdict::Reject(e),
    }
}

/// Checks an embedded message. Messages sent by `vouched_by` itself may
/// carry no authenticator: the enclosing signature covers them.
pub fn verify_detached(
    det: &DetachedEnvelope,
    mode: CryptoMode,
    keys: &KeyStore,
    vouched_by: Option<NodeId>,
) -> bool {
    if det.auths.is_empty() {
        return vouched_by == Some(det.sender);
    }
    check_auth(
        det.kind,
        det.sender,
        &det.auths,
        &det.auth_digest(),
        mode,
        keys,
    )
    .is_ok()
}

/// Entries plus their insertion order for eviction.
type CacheEntries = (HashMap<Digest, Arc<Batch>>, VecDeque<Digest>);

/// Batches whose client signatures already verified, keyed by batch digest.
/// A later copy with the same digest is accepted without re-verification
/// only if its client signatures are identical too.
#[derive(Debug)]
pub struct BatchCache {
    inner: Mutex<CacheEntries>,
    capacity: usize,
}

impl BatchCache {
    pub fn new(capacity: usize) -> Self {
        BatchCache {
            inner: Mutex::new((HashMap::new(), VecDeque::new())),
            capacity: capacity.max(1),
        }
    }

    /// `batch` must already hash to `d`; the digest binds everything
    /// except the client signatures, so only those are compared.
    fn contains(&self, d: &Digest, batch: &[SignedRequest]) -> bool {
        let g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        g.0.get(d).is_some_and(|b| {
            b.len() == batch.len() && b.iter().zip(batch).all(|(x, y)| x.signature == y.signature)
        })
    }

    /// Records a batch as verified. Callers outside this module use it for
    /// batches assembled from individually verified requests.
    pub fn insert(&self, d: Digest, batch: &[SignedRequest]) {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let (map, order) = &mut *g;
        if map.insert(d, Arc::new(batch.to_vec())).is_none() {
            order.push_back(d);
            while order.len() > self.capacity {
                if let Some(old) = order.pop_front() {
                    map.remove(&old);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Embedded<'a> {
    mode: CryptoMode,
    keys: &'a KeyStore,
    cache: Option<&'a BatchCache>,
}

impl Embedded<'_> {
    fn batch(&self, d: &Digest, batch: &[SignedRequest]) -> Result<(), RejectReason> {
        if batch.is_empty() {
            return Ok(());
        }
        if let Some(c) = self.cache {
            if c.contains(d, batch) {
                return Ok(());
            }
        }
        for m in batch {
            if !self.keys.verify_signature(
                m.request.client_id,
                &m.request.auth_digest(),
                &m.signature,
            ) {
                return Err(RejectReason::BadClientSignature);
            }
        }
        if let Some(c) = self.cache {
            c.insert(*d, batch);
        }
        Ok(())
    }

    fn view_change(&self, vc: &ViewChangeBody, sender: NodeId) -> Result<(), RejectReason> {
        let vouched = Some(sender);
        for v in vc
            .checkpoint_proof
            .votes
            .iter()
            .chain(vc.prepared.iter().flat_map(|c| c.votes.iter()))
        {
            if !verify_detached(v, self.mode, self.keys, vouched) {
                return Err(RejectReason::BadEmbedded);
            }
        }
        for (c, b) in vc.prepared.iter().zip(&vc.batches) {
            self.batch(&c.digest, b)?;
        }
        Ok(())
    }

    fn message(&self, msg: &Message) -> Result<(), RejectReason> {
        match &msg.body {
            Body::PrePrepare(pp) => self.batch(&pp.batch_digest, &pp.batch),
            Body::Prepare(v) | Body::Commit(v) => match &v.batch {
                Some(b) => self.batch(&v.digest, b),
                None => Ok(()),
            },
            Body::ViewChange(vc) => self.view_change(vc, msg.sender),
            Body::NewView(nv) => {
                for p in &nv.proof {
                    // the new primary's own view change is covered by its signature here
                    if p.kind != MessageKind::ViewChange
                        || !verify_detached(p, self.mode, self.keys, Some(msg.sender))
                    {
                        return Err(RejectReason::BadEmbedded);
                    }
                    let vc = ViewChangeBody::decode_core(&p.core)
                        .map_err(|_| RejectReason::BadEmbedded)?;
                    self.view_change(&vc, p.sender)?;
                }
                for (_, pp) in &nv.o {
                    self.batch(&pp.batch_digest, &pp.batch)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Checks what a message embeds: client signatures inside batches and the
/// certificates carried by view changes.
pub fn verify_embedded(msg: &Message, mode: CryptoMode, keys: &KeyStore) -> Verdict {
    verify_embedded_with(msg, mode, keys, None)
}

/// [`verify_embedded`] that skips batches already verified through `cache`.
/// Embedded batches must already match their digests ([`hash_incoming`]).
pub fn verify_embedded_with(
    msg: &Message,
    mode: CryptoMode,
    keys: &KeyStore,
    cache: Option<&BatchCache>,
) -> Verdict {
    Embedded { mode, keys, cache }.message(msg).into()
}
