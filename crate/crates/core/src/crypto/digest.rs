use std::fmt;

use sha2::{Digest as _, Sha256};

use crate::wire::{MessageKind, NodeId, Seq, View};

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const LEN: usize = 32;

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl AsRef<[u8]> for Digest {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

pub fn digest(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Incremental SHA-256 over several slices.
#[derive(Clone, Default)]
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new() -> Self {
        Hasher(Sha256::new())
    }

    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update(bytes);
        self
    }

    pub fn finish(self) -> Digest {
        Digest(self.0.finalize().into())
    }
}

/// The digest authenticators are computed over: the header fields and the
/// authenticated core of the payload. Frame length and auth section are
/// excluded.
pub fn envelope_digest(
    kind: MessageKind,
    view: View,
    seq: Seq,
    sender: NodeId,
    core: &[u8],
) -> Digest {
    let mut h = Hasher::new();
    h.update(&[kind as u8])
        .update(&view.to_le_bytes())
        .update(&seq.to_le_bytes())
        .update(&sender.to_le_bytes())
        .update(&(core.len() as u32).to_le_bytes())
        .update(core);
    h.finish()
}
