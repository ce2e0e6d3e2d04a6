//! Envelope codec and stream framing.
//!
//! Every protocol message travels as one length-prefixed frame. All integers
//! are little-endian:
//!
//! ```text
//! [u32 frame_len][u8 kind][u64 view][u64 seq][u16 sender]
//! [u32 payload_len][payload]
//! [u16 auth_count]{[u16 recipient][u16 auth_len][auth bytes]}*
//! ```
//!
//! `frame_len` counts every byte after itself.

use std::fmt;

use thiserror::Error;

/// Identifier shared by replicas and clients.
pub type NodeId = u16;
pub type View = u64;
pub type Seq = u64;

/// Recipient slot used for signature entries in the auth section.
pub const SIGNATURE_SLOT: NodeId = NodeId::MAX;

pub const DEFAULT_MAX_PAYLOAD: usize = 1 << 20;
pub const DEFAULT_MAX_FRAME: usize = 2 << 20;

/// Bytes between the frame length and the payload.
const FIXED_HEADER: usize = 1 + 8 + 8 + 2 + 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("payload of {size} bytes exceeds maximum {max}")]
    EncodeTooLarge { size: usize, max: usize },
    #[error("incomplete frame: need {need} bytes, have {have}")]
    Incomplete { need: usize, have: usize },
    #[error("unknown message kind {0:#04x}")]
    UnknownKind(u8),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("declared frame length {len} exceeds maximum {max}")]
    FrameTooLarge { len: usize, max: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    Request = 0,
    PrePrepare = 1,
    Prepare = 2,
    Commit = 3,
    Reply = 4,
    Checkpoint = 5,
    ViewChange = 6,
    NewView = 7,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::Request,
        MessageKind::PrePrepare,
        MessageKind::Prepare,
        MessageKind::Commit,
        MessageKind::Reply,
        MessageKind::Checkpoint,
        MessageKind::ViewChange,
        MessageKind::NewView,
    ];

    pub fn from_byte(b: u8) -> Result<Self, WireError> {
        Self::ALL
            .get(b as usize)
            .copied()
            .ok_or(WireError::UnknownKind(b))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Request => "REQUEST",
            MessageKind::PrePrepare => "PRE_PREPARE",
            MessageKind::Prepare => "PREPARE",
            MessageKind::Commit => "COMMIT",
            MessageKind::Reply => "REPLY",
            MessageKind::Checkpoint => "CHECKPOINT",
            MessageKind::ViewChange => "VIEW_CHANGE",
            MessageKind::NewView => "NEW_VIEW",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One entry of the auth section: a signature (recipient = [`SIGNATURE_SLOT`])
/// or a MAC tag addressed to `recipient`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AuthEntry {
    pub recipient: NodeId,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WireEnvelope {
    pub kind: MessageKind,
    pub view: View,
    pub seq: Seq,
    pub sender: NodeId,
    pub payload: Vec<u8>,
    pub auths: Vec<AuthEntry>,
}

impl WireEnvelope {
    pub fn new(kind: MessageKind, view: View, seq: Seq, sender: NodeId, payload: Vec<u8>) -> Self {
        WireEnvelope {
            kind,
            view,
            seq,
            sender,
            payload,
            auths: Vec::new(),
        }
    }

    /// Size of the frame `encode` would produce, length prefix included.
    pub fn encoded_len(&self) -> usize {
        4 + FIXED_HEADER
            + self.payload.len()
            + 2
            + self.auths.iter().map(|a| 4 + a.bytes.len()).sum::<usize>()
    }
}

/// Size limits enforced by the codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub max_payload: usize,
    pub max_frame: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_payload: DEFAULT_MAX_PAYLOAD,
            max_frame: DEFAULT_MAX_FRAME,
        }
    }
}

pub fn encode(envelope: &WireEnvelope) -> Result<Vec<u8>, WireError> {
    encode_with(envelope, Limits::default())
}

pub fn encode_with(envelope: &WireEnvelope, limits: Limits) -> Result<Vec<u8>, WireError> {
    if envelope.payload.len() > limits.max_payload {
        return Err(WireError::EncodeTooLarge {
            size: envelope.payload.len(),
            max: limits.max_payload,
        });
    }
    if envelope.auths.len() > u16::MAX as usize {
        return Err(WireError::Malformed("too many authenticators"));
    }
    let total = envelope.encoded_len();
    if total - 4 > limits.max_frame {
        return Err(WireError::EncodeTooLarge {
            size: total - 4,
            max: limits.max_frame,
        });
    }
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&((total - 4) as u32).to_le_bytes());
    out.push(envelope.kind as u8);
    out.extend_from_slice(&envelope.view.to_le_bytes());
    out.extend_from_slice(&envelope.seq.to_le_bytes());
    out.extend_from_slice(&envelope.sender.to_le_bytes());
    out.extend_from_slice(&(envelope.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&envelope.payload);
    out.extend_from_slice(&(envelope.auths.len() as u16).to_le_bytes());
    for auth in &envelope.auths {
        if auth.bytes.len() > u16::MAX as usize {
            return Err(WireError::Malformed("authenticator too long"));
        }
        out.extend_from_slice(&auth.recipient.to_le_bytes());
        out.extend_from_slice(&(auth.bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(&auth.bytes);
    }
    debug_assert_eq!(out.len(), total);
    Ok(out)
}

/// Decodes exactly one complete frame.
pub fn decode(bytes: &[u8]) -> Result<WireEnvelope, WireError> {
    decode_with(bytes, Limits::default())
}

pub fn decode_with(bytes: &[u8], limits: Limits) -> Result<WireEnvelope, WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Incomplete {
            need: 4,
            have: bytes.len(),
        });
    }
    let frame_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if frame_len > limits.max_frame {
        return Err(WireError::FrameTooLarge {
            len: frame_len,
            max: limits.max_frame,
        });
    }
    let need = 4usize.saturating_add(frame_len);
    if bytes.len() < need {
        return Err(WireError::Incomplete {
            need,
            have: bytes.len(),
        });
    }
    if bytes.len() > need {
        return Err(WireError::Malformed("trailing bytes after frame"));
    }
    let mut r = Reader::new(&bytes[4..]);
    let kind_byte = r
        .u8()
        .map_err(|_| WireError::Malformed("frame shorter than header"))?;
    let kind = MessageKind::from_byte(kind_byte)?;
    let view = r.u64()?;
    let seq = r.u64()?;
    let sender = r.u16()?;
    let payload_len = r.u32()? as usize;
    if payload_len > limits.max_payload {
        return Err(WireError::Malformed("payload length above maximum"));
    }
    let payload = r.take(payload_len)?.to_vec();
    let auth_count = r.u16()? as usize;
    let mut auths = Vec::with_capacity(auth_count.min(64));
    for _ in 0..auth_count {
        let recipient = r.u16()?;
        let len = r.u16()? as usize;
        auths.push(AuthEntry {
            recipient,
            bytes: r.take(len)?.to_vec(),
        });
    }
    if !r.is_empty() {
        return Err(WireError::Malformed("declared lengths shorter than frame"));
    }
    Ok(WireEnvelope {
        kind,
        view,
        seq,
        sender,
        payload,
        auths,
    })
}

/// Splits an ordered byte stream into frames on the u32 length prefix.
///
/// State is per connection; partial frames stay buffered until complete.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
    max_frame: usize,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_FRAME)
    }
}

impl FrameDecoder {
    pub fn new(max_frame: usize) -> Self {
        FrameDecoder {
            buf: Vec::new(),
            start: 0,
            max_frame,
        }
    }

    pub fn push(&mut self, data: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        }
        self.buf.extend_from_slice(data);
    }

    /// Next complete frame (length prefix included), if any.
    ///
    /// `FrameTooLarge` is terminal: the connection must be dropped.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, WireError> {
        let avail = &self.buf[self.start..];
        if avail.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes(avail[..4].try_into().unwrap()) as usize;
        if len > self.max_frame {
            return Err(WireError::FrameTooLarge {
                len,
                max: self.max_frame,
            });
        }
        if avail.len() < 4 + len {
            return Ok(None);
        }
        let frame = avail[..4 + len].to_vec();
        self.start += 4 + len;
        if self.start > 64 * 1024 && self.start * 2 > self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        Ok(Some(frame))
    }

    /// Feeds `data` and drains every frame it completes.
    pub fn feed(&mut self, data: &[u8]) -> Result<Vec<Vec<u8>>, WireError> {
        self.push(data);
        let mut frames = Vec::new();
        while let Some(frame) = self.next_frame()? {
            frames.push(frame);
        }
        Ok(frames)
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }
}

/// Parses a commented hex dump: `#` starts a comment, whitespace is ignored.
pub fn parse_hex_dump(text: &str) -> Result<Vec<u8>, hex::FromHexError> {
    let digits: String = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.chars().filter(|c| !c.is_whitespace()))
        .collect();
    hex::decode(digits)
}

/// Bounds-checked little-endian cursor. Every read failure is `Malformed`.
#[derive(Clone, Copy, Debug)]
pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn rest(&self) -> &'a [u8] {
        &self.data[self.pos..]
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Malformed("declared length exceeds frame"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn array32(&mut self) -> Result<[u8; 32], WireError> {
        Ok(self.take(32)?.try_into().unwrap())
    }
}
