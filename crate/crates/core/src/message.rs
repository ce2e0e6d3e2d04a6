//! Typed protocol message bodies and their payload encodings.
//!
//! Payloads of PRE_PREPARE, PREPARE and COMMIT open with the 32-byte batch
//! digest and may carry the batch itself as attached data. VIEW_CHANGE and
//! NEW_VIEW payloads open with a `u32` core length. Authenticators cover
//! only the core (see [`auth_core`]); attached batches are bound to the core
//! through their digests, so certificates can embed messages without their
//! attachments.

use crate::crypto::{digest, envelope_digest, Digest, Hasher};
use crate::wire::{AuthEntry, MessageKind, NodeId, Reader, Seq, View, WireEnvelope, WireError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub struct RequestKey {
    pub client: NodeId,
    pub id: u64,
}

/// A client operation. The payload is an opaque blob.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Request {
    pub client_id: NodeId,
    pub request_id: u64,
    pub payload: Vec<u8>,
}

impl Request {
    pub fn new(client_id: NodeId, request_id: u64, payload: Vec<u8>) -> Self {
        Request {
            client_id,
            request_id,
            payload,
        }
    }

    pub fn key(&self) -> RequestKey {
        RequestKey {
            client: self.client_id,
            id: self.request_id,
        }
    }

    /// `[u16 client][u64 request_id][u32 len][payload]`
    pub fn write_canonical(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    /// Digest of the canonical encoding; doubles as the reply result.
    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.update(&self.client_id.to_le_bytes())
            .update(&self.request_id.to_le_bytes())
            .update(&(self.payload.len() as u32).to_le_bytes())
            .update(&self.payload);
        h.finish()
    }

    fn envelope_payload(&self) -> Vec<u8> {
        let mut p = Vec::with_capacity(10 + self.payload.len());
        p.extend_from_slice(&self.client_id.to_le_bytes());
        p.extend_from_slice(&self.request_id.to_le_bytes());
        p.extend_from_slice(&self.payload);
        p
    }

    /// The REQUEST envelope the client signs (view 0, seq 0, no auths).
    pub fn envelope(&self) -> WireEnvelope {
        WireEnvelope::new(
            MessageKind::Request,
            0,
            0,
            self.client_id,
            self.envelope_payload(),
        )
    }

    /// What the client signature covers.
    pub fn auth_digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.update(&[MessageKind::Request as u8])
            .update(&0u64.to_le_bytes())
            .update(&0u64.to_le_bytes())
            .update(&self.client_id.to_le_bytes())
            .update(&((10 + self.payload.len()) as u32).to_le_bytes())
            .update(&self.client_id.to_le_bytes())
            .update(&self.request_id.to_le_bytes())
            .update(&self.payload);
        h.finish()
    }
}

/// A request together with its client's signature, as carried in batches.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SignedRequest {
    pub request: Request,
    pub signature: Vec<u8>,
}

pub type Batch = Vec<SignedRequest>;

/// Digest over the concatenated canonical encodings of the batch members.
/// Signatures are not covered.
pub fn batch_digest(batch: &[SignedRequest]) -> Digest {
    let mut h = Hasher::new();
    for m in batch {
        let r = &m.request;
        h.update(&r.client_id.to_le_bytes())
            .update(&r.request_id.to_le_bytes())
            .update(&(r.payload.len() as u32).to_le_bytes())
            .update(&r.payload);
    }
    h.finish()
}

/// Batch digest of the no-op batch.
pub fn noop_digest() -> Digest {
    digest(&[])
}

/// `[u32 count]{[u16 client][u64 id][u32 len][payload][u16 sig_len][sig]}`
pub fn encode_batch(batch: &[SignedRequest], out: &mut Vec<u8>) {
    out.extend_from_slice(&(batch.len() as u32).to_le_bytes());
    for m in batch {
        m.request.write_canonical(out);
        out.extend_from_slice(&(m.signature.len() as u16).to_le_bytes());
        out.extend_from_slice(&m.signature);
    }
}

pub fn decode_batch(r: &mut Reader<'_>) -> Result<Batch, WireError> {
    let count = r.u32()? as usize;
    // every member takes at least 16 bytes
    if count > r.remaining() / 16 {
        return Err(WireError::Malformed("batch count exceeds frame"));
    }
    let mut batch = Vec::with_capacity(count);
    for _ in 0..count {
        let client_id = r.u16()?;
        let request_id = r.u64()?;
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        let sig_len = r.u16()? as usize;
        let signature = r.take(sig_len)?.to_vec();
        batch.push(SignedRequest {
            request: Request {
                client_id,
                request_id,
                payload,
            },
            signature,
        });
    }
    Ok(batch)
}

/// Batch digest computed straight from encoded bytes, without building the
/// batch. Returns the digest and the number of bytes consumed.
pub fn batch_digest_raw(encoded: &[u8]) -> Result<(Digest, usize), WireError> {
    let mut r = Reader::new(encoded);
    let count = r.u32()? as usize;
    if count > r.remaining() / 16 {
        return Err(WireError::Malformed("batch count exceeds frame"));
    }
    let mut h = Hasher::new();
    for _ in 0..count {
        let start = r.position();
        r.take(10)?;
        let len = r.u32()? as usize;
        r.take(len)?;
        h.update(&encoded[start..r.position()]);
        let sig_len = r.u16()? as usize;
        r.take(sig_len)?;
    }
    Ok((h.finish(), r.position()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrePrepareBody {
    pub batch: Batch,
    pub batch_digest: Digest,
}

impl PrePrepareBody {
    pub fn new(batch: Batch) -> Self {
        let batch_digest = batch_digest(&batch);
        PrePrepareBody {
            batch,
            batch_digest,
        }
    }

    pub fn noop() -> Self {
        PrePrepareBody {
            batch: Vec::new(),
            batch_digest: noop_digest(),
        }
    }

    pub fn is_noop(&self) -> bool {
        self.batch.is_empty()
    }
}

/// PREPARE / COMMIT body: the batch digest plus, optionally, the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteBody {
    pub digest: Digest,
    pub batch: Option<Batch>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplyBody {
    pub client_id: NodeId,
    pub request_id: u64,
    pub batch_seq: Seq,
    pub result: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointBody {
    pub state_digest: Digest,
}

/// A message stripped to its authenticated core, as embedded in certificates.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DetachedEnvelope {
    pub kind: MessageKind,
    pub view: View,
    pub seq: Seq,
    pub sender: NodeId,
    pub core: Vec<u8>,
    pub auths: Vec<AuthEntry>,
}

impl DetachedEnvelope {
    pub fn auth_digest(&self) -> Digest {
        envelope_digest(self.kind, self.view, self.seq, self.sender, &self.core)
    }

    /// Digest carried by a PRE_PREPARE / PREPARE / COMMIT / CHECKPOINT core.
    pub fn vote_digest(&self) -> Option<Digest> {
        match self.kind {
            MessageKind::PrePrepare
            | MessageKind::Prepare
            | MessageKind::Commit
            | MessageKind::Checkpoint
                if self.core.len() == 32 =>
            {
                Some(Digest(self.core[..].try_into().unwrap()))
            }
            _ => None,
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.kind as u8);
        out.extend_from_slice(&self.view.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&(self.core.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.core);
        out.extend_from_slice(&(self.auths.len() as u16).to_le_bytes());
        for a in &self.auths {
            out.extend_from_slice(&a.recipient.to_le_bytes());
            out.extend_from_slice(&(a.bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(&a.bytes);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let kind = MessageKind::from_byte(r.u8()?)?;
        let view = r.u64()?;
        let seq = r.u64()?;
        let sender = r.u16()?;
        let len = r.u32()? as usize;
        let core = r.take(len)?.to_vec();
        let n = r.u16()? as usize;
        let mut auths = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let recipient = r.u16()?;
            let l = r.u16()? as usize;
            auths.push(AuthEntry {
                recipient,
                bytes: r.take(l)?.to_vec(),
            });
        }
        Ok(DetachedEnvelope {
            kind,
            view,
            seq,
            sender,
            core,
            auths,
        })
    }
}

/// Matching messages certifying a `(view, seq, digest)` triple.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Certificate {
    pub view: View,
    pub seq: Seq,
    pub digest: Digest,
    pub votes: Vec<DetachedEnvelope>,
}

impl Certificate {
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.view.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.digest.0);
        out.extend_from_slice(&(self.votes.len() as u16).to_le_bytes());
        for v in &self.votes {
            v.encode(out);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let view = r.u64()?;
        let seq = r.u64()?;
        let digest = Digest(r.array32()?);
        let n = r.u16()? as usize;
        let mut votes = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            votes.push(DetachedEnvelope::decode(r)?);
        }
        Ok(Certificate {
            view,
            seq,
            digest,
            votes,
        })
    }

    /// Distinct senders whose vote matches the certified triple.
    pub fn matching_senders(&self) -> std::collections::BTreeSet<NodeId> {
        self.votes
            .iter()
            .filter(|v| {
                v.view == self.view && v.seq == self.seq && v.vote_digest() == Some(self.digest)
            })
            .map(|v| v.sender)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewChangeBody {
    pub new_view: View,
    pub last_stable_seq: Seq,
    pub checkpoint_proof: Certificate,
    /// Prepare certificates for every prepared sequence above the stable checkpoint.
    pub prepared: Vec<Certificate>,
    /// Attached batches, parallel to `prepared`; empty when detached.
    pub batches: Vec<Batch>,
}

impl ViewChangeBody {
    pub fn encode_core(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.new_view.to_le_bytes());
        out.extend_from_slice(&self.last_stable_seq.to_le_bytes());
        self.checkpoint_proof.encode(&mut out);
        out.extend_from_slice(&(self.prepared.len() as u32).to_le_bytes());
        for c in &self.prepared {
            c.encode(&mut out);
        }
        out
    }

    pub fn decode_core(core: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(core);
        let new_view = r.u64()?;
        let last_stable_seq = r.u64()?;
        let checkpoint_proof = Certificate::decode(&mut r)?;
        let n = r.u32()? as usize;
        if n > r.remaining() / 50 {
            return Err(WireError::Malformed("prepared count exceeds frame"));
        }
        let mut prepared = Vec::with_capacity(n);
        for _ in 0..n {
            prepared.push(Certificate::decode(&mut r)?);
        }
        if !r.is_empty() {
            return Err(WireError::Malformed("trailing bytes in view-change core"));
        }
        Ok(ViewChangeBody {
            new_view,
            last_stable_seq,
            checkpoint_proof,
            prepared,
            batches: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewViewBody {
    pub view: View,
    /// The VIEW_CHANGE messages O was computed from, detached.
    pub proof: Vec<DetachedEnvelope>,
    /// Re-proposed sequences; no-op batches fill gaps.
    pub o: Vec<(Seq, PrePrepareBody)>,
}

impl NewViewBody {
    pub fn encode_core(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.view.to_le_bytes());
        out.extend_from_slice(&(self.proof.len() as u16).to_le_bytes());
        for p in &self.proof {
            p.encode(&mut out);
        }
        out.extend_from_slice(&(self.o.len() as u32).to_le_bytes());
        for (seq, pp) in &self.o {
            out.extend_from_slice(&seq.to_le_bytes());
            out.extend_from_slice(&pp.batch_digest.0);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Body {
    Request(Request),
    PrePrepare(PrePrepareBody),
    Prepare(VoteBody),
    Commit(VoteBody),
    Reply(ReplyBody),
    Checkpoint(CheckpointBody),
    ViewChange(ViewChangeBody),
    NewView(NewViewBody),
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::Request(_) => MessageKind::Request,
            Body::PrePrepare(_) => MessageKind::PrePrepare,
            Body::Prepare(_) => MessageKind::Prepare,
            Body::Commit(_) => MessageKind::Commit,
            Body::Reply(_) => MessageKind::Reply,
            Body::Checkpoint(_) => MessageKind::Checkpoint,
            Body::ViewChange(_) => MessageKind::ViewChange,
            Body::NewView(_) => MessageKind::NewView,
        }
    }
}

/// A decoded protocol message without its authenticators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub view: View,
    pub seq: Seq,
    pub sender: NodeId,
    pub body: Body,
}

impl Message {
    pub fn new(view: View, seq: Seq, sender: NodeId, body: Body) -> Self {
        Message {
            view,
            seq,
            sender,
            body,
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match &self.body {
            Body::Request(r) => {
                out.extend_from_slice(&r.client_id.to_le_bytes());
                out.extend_from_slice(&r.request_id.to_le_bytes());
                out.extend_from_slice(&r.payload);
            }
            Body::PrePrepare(pp) => {
                out.extend_from_slice(&pp.batch_digest.0);
                encode_batch(&pp.batch, &mut out);
            }
            Body::Prepare(v) | Body::Commit(v) => {
                out.extend_from_slice(&v.digest.0);
                if let Some(b) = &v.batch {
                    encode_batch(b, &mut out);
                }
            }
            Body::Reply(r) => {
                out.extend_from_slice(&r.client_id.to_le_bytes());
                out.extend_from_slice(&r.request_id.to_le_bytes());
                out.extend_from_slice(&r.batch_seq.to_le_bytes());
                out.extend_from_slice(&r.result.0);
            }
            Body::Checkpoint(c) => out.extend_from_slice(&c.state_digest.0),
            Body::ViewChange(vc) => {
                let core = vc.encode_core();
                out.extend_from_slice(&(core.len() as u32).to_le_bytes());
                out.extend_from_slice(&core);
                out.extend_from_slice(&(vc.batches.len() as u32).to_le_bytes());
                for b in &vc.batches {
                    encode_batch(b, &mut out);
                }
            }
            Body::NewView(nv) => {
                let core = nv.encode_core();
                out.extend_from_slice(&(core.len() as u32).to_le_bytes());
                out.extend_from_slice(&core);
                out.extend_from_slice(&(nv.o.len() as u32).to_le_bytes());
                for (_, pp) in &nv.o {
                    encode_batch(&pp.batch, &mut out);
                }
            }
        }
        out
    }

    pub fn to_envelope(&self) -> WireEnvelope {
        WireEnvelope::new(
            self.kind(),
            self.view,
            self.seq,
            self.sender,
            self.encode_payload(),
        )
    }

    pub fn from_envelope(env: &WireEnvelope) -> Result<Self, WireError> {
        let mut r = Reader::new(&env.payload);
        let body = match env.kind {
            MessageKind::Request => {
                let client_id = r.u16()?;
                let request_id = r.u64()?;
                if client_id != env.sender {
                    return Err(WireError::Malformed("request client differs from sender"));
                }
                if env.view != 0 || env.seq != 0 {
                    return Err(WireError::Malformed(
                        "request header must carry view 0 and seq 0",
                    ));
                }
                Body::Request(Request {
                    client_id,
                    request_id,
                    payload: r.rest().to_vec(),
                })
            }
            MessageKind::PrePrepare => {
                let batch_digest = Digest(r.array32()?);
                let batch = decode_batch(&mut r)?;
                expect_end(&r)?;
                Body::PrePrepare(PrePrepareBody {
                    batch,
                    batch_digest,
                })
            }
            MessageKind::Prepare | MessageKind::Commit => {
                let digest = Digest(r.array32()?);
                let batch = if r.is_empty() {
                    None
                } else {
                    Some(decode_batch(&mut r)?)
                };
                expect_end(&r)?;
                let v = VoteBody { digest, batch };
                if env.kind == MessageKind::Prepare {
                    Body::Prepare(v)
                } else {
                    Body::Commit(v)
                }
            }
            MessageKind::Reply => {
                let client_id = r.u16()?;
                let request_id = r.u64()?;
                let batch_seq = r.u64()?;
                let result = Digest(r.array32()?);
                expect_end(&r)?;
                Body::Reply(ReplyBody {
                    client_id,
                    request_id,
                    batch_seq,
                    result,
                })
            }
            MessageKind::Checkpoint => {
                let state_digest = Digest(r.array32()?);
                expect_end(&r)?;
                Body::Checkpoint(CheckpointBody { state_digest })
            }
            MessageKind::ViewChange => {
                let len = r.u32()? as usize;
                let mut vc = ViewChangeBody::decode_core(r.take(len)?)?;
                let n = r.u32()? as usize;
                if n != 0 && n != vc.prepared.len() {
                    return Err(WireError::Malformed(
                        "attached batches do not match prepared set",
                    ));
                }
                for _ in 0..n {
                    vc.batches.push(decode_batch(&mut r)?);
                }
                expect_end(&r)?;
                if vc.new_view != env.view {
                    return Err(WireError::Malformed("view-change header view mismatch"));
                }
                Body::ViewChange(vc)
            }
            MessageKind::NewView => {
                let len = r.u32()? as usize;
                let core = r.take(len)?;
                let mut c = Reader::new(core);
                let view = c.u64()?;
                let np = c.u16()? as usize;
                let mut proof = Vec::with_capacity(np.min(64));
                for _ in 0..np {
                    proof.push(DetachedEnvelope::decode(&mut c)?);
                }
                let no = c.u32()? as usize;
                if no > c.remaining() / 40 {
                    return Err(WireError::Malformed("re-proposal count exceeds frame"));
                }
                let mut entries = Vec::with_capacity(no);
                for _ in 0..no {
                    entries.push((c.u64()?, Digest(c.array32()?)));
                }
                expect_end(&c)?;
                let nb = r.u32()? as usize;
                if nb != no {
                    return Err(WireError::Malformed(
                        "attached batches do not match re-proposals",
                    ));
                }
                let mut o = Vec::with_capacity(no);
                for (seq, batch_digest) in entries {
                    let batch = decode_batch(&mut r)?;
                    o.push((
                        seq,
                        PrePrepareBody {
                            batch,
                            batch_digest,
                        },
                    ));
                }
                expect_end(&r)?;
                if view != env.view {
                    return Err(WireError::Malformed("new-view header view mismatch"));
                }
                Body::NewView(NewViewBody { view, proof, o })
            }
        };
        Ok(Message {
            view: env.view,
            seq: env.seq,
            sender: env.sender,
            body,
        })
    }

    /// Re-encodes the authenticated core and attaches `auths`.
    pub fn detach(&self, auths: Vec<AuthEntry>) -> DetachedEnvelope {
        let payload = self.encode_payload();
        let core = auth_core(self.kind(), &payload)
            .expect("locally encoded payload is well-formed")
            .to_vec();
        DetachedEnvelope {
            kind: self.kind(),
            view: self.view,
            seq: self.seq,
            sender: self.sender,
            core,
            auths,
        }
    }
}

fn expect_end(r: &Reader<'_>) -> Result<(), WireError> {
    if r.is_empty() {
        Ok(())
    } else {
        Err(WireError::Malformed("trailing bytes in payload"))
    }
}

/// The slice of `payload` that authenticators cover.
pub fn auth_core(kind: MessageKind, payload: &[u8]) -> Result<&[u8], WireError> {
    match kind {
        MessageKind::PrePrepare | MessageKind::Prepare | MessageKind::Commit => payload
            .get(..32)
            .ok_or(WireError::Malformed("payload shorter than digest")),
        MessageKind::ViewChange | MessageKind::NewView => {
            let mut r = Reader::new(payload);
            let len = r.u32()? as usize;
            r.take(len)
        }
        _ => Ok(payload),
    }
}

/// Authenticator digest of a full envelope.
pub fn auth_digest_of(env: &WireEnvelope) -> Result<Digest, WireError> {
    let core = auth_core(env.kind, &env.payload)?;
    Ok(envelope_digest(
        env.kind, env.view, env.seq, env.sender, core,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{decode, encode};

    fn req(c: NodeId, id: u64, n: usize) -> SignedRequest {
        SignedRequest {
            request: Request::new(c, id, vec![id as u8; n]),
            signature: vec![0x5A; 7],
        }
    }

    #[test]
    fn request_auth_digest_matches_its_envelope() {
        let r = Request::new(9, 42, b"hello".to_vec());
        let env = r.envelope();
        assert_eq!(auth_digest_of(&env).unwrap(), r.auth_digest());
    }

    #[test]
    fn raw_batch_digest_agrees_with_structured() {
        let batch = vec![req(5, 1, 3), req(6, 2, 0), req(5, 3, 100)];
        let mut enc = Vec::new();
        encode_batch(&batch, &mut enc);
        let (d, used) = batch_digest_raw(&enc).unwrap();
        assert_eq!(used, enc.len());
        assert_eq!(d, batch_digest(&batch));
        // oracle: digest of the concatenated canonical encodings
        let mut canon = Vec::new();
        for m in &batch {
            m.request.write_canonical(&mut canon);
        }
        assert_eq!(d, digest(&canon));
    }

    #[test]
    fn batch_digest_ignores_signatures_but_binds_ids() {
        let a = vec![req(5, 1, 3)];
        let mut b = a.clone();
        b[0].signature = vec![1, 2, 3];
        assert_eq!(batch_digest(&a), batch_digest(&b));
        let mut c = a.clone();
        c[0].request.client_id = 6;
        assert_ne!(batch_digest(&a), batch_digest(&c));
    }

    #[test]
    fn bodies_round_trip_through_envelopes() {
        let pp = PrePrepareBody::new(vec![req(5, 1, 3), req(6, 1, 4)]);
        let vote = VoteBody {
            digest: pp.batch_digest,
            batch: Some(pp.batch.clone()),
        };
        let detached = Message::new(0, 1, 2, Body::Prepare(vote.clone())).detach(vec![AuthEntry {
            recipient: 1,
            bytes: vec![9; 32],
        }]);
        let cert = Certificate {
            view: 0,
            seq: 1,
            digest: pp.batch_digest,
            votes: vec![detached.clone()],
        };
        let vc = ViewChangeBody {
            new_view: 1,
            last_stable_seq: 0,
            checkpoint_proof: Certificate::default(),
            prepared: vec![cert],
            batches: vec![pp.batch.clone()],
        };
        let vc_msg = Message::new(1, 0, 3, Body::ViewChange(vc));
        let nv = NewViewBody {
            view: 1,
            proof: vec![vc_msg.detach(vec![])],
            o: vec![(1, pp.clone()), (2, PrePrepareBody::noop())],
        };
        let msgs = vec![
            Message::new(0, 0, 5, Body::Request(Request::new(5, 7, vec![1, 2]))),
            Message::new(0, 1, 0, Body::PrePrepare(pp.clone())),
            Message::new(0, 1, 2, Body::Prepare(vote.clone())),
            Message::new(
                0,
                1,
                2,
                Body::Commit(VoteBody {
                    digest: pp.batch_digest,
                    batch: None,
                }),
            ),
            Message::new(
                0,
                1,
                2,
                Body::Reply(ReplyBody {
                    client_id: 5,
                    request_id: 7,
                    batch_seq: 1,
                    result: digest(b"r"),
                }),
            ),
            Message::new(
                0,
                500,
                2,
                Body::Checkpoint(CheckpointBody {
                    state_digest: digest(b"s"),
                }),
            ),
            vc_msg,
            Message::new(1, 0, 1, Body::NewView(nv)),
        ];
        for m in msgs {
            let env = decode(&encode(&m.to_envelope()).unwrap()).unwrap();
            assert_eq!(Message::from_envelope(&env).unwrap(), m, "{}", m.kind());
        }
    }

    #[test]
    fn detached_view_change_core_parses_back() {
        let vc = ViewChangeBody {
            new_view: 4,
            last_stable_seq: 500,
            checkpoint_proof: Certificate {
                view: 0,
                seq: 500,
                digest: digest(b"st"),
                votes: vec![],
            },
            prepared: vec![],
            batches: vec![],
        };
        let m = Message::new(4, 500, 1, Body::ViewChange(vc.clone()));
        let d = m.detach(vec![]);
        assert_eq!(ViewChangeBody::decode_core(&d.core).unwrap(), vc);
        assert_eq!(d.auth_digest(), auth_digest_of(&m.to_envelope()).unwrap());
    }

    #[test]
    fn request_with_foreign_sender_is_malformed() {
        let mut env = Request::new(5, 1, vec![]).envelope();
        env.sender = 6;
        assert!(Message::from_envelope(&env).is_err());
    }
}
