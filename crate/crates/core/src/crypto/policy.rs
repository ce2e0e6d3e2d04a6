use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::wire::MessageKind;

/// Which authentication each message class gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CryptoMode {
    /// Public-key signatures on every message.
    PkOnly,
    /// MACs on inter-node traffic, signatures towards clients.
    MacInterNode,
    /// MACs everywhere except client requests and periodic checkpoint
    /// block signatures.
    DomainOptimized,
}

impl CryptoMode {
    pub const ALL: [CryptoMode; 3] = [
        CryptoMode::PkOnly,
        CryptoMode::MacInterNode,
        CryptoMode::DomainOptimized,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CryptoMode::PkOnly => "pk_only",
            CryptoMode::MacInterNode => "mac_inter_node",
            CryptoMode::DomainOptimized => "domain_optimized",
        }
    }
}

impl fmt::Display for CryptoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CryptoMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pk_only" | "pk" => Ok(CryptoMode::PkOnly),
            "mac_inter_node" | "mac" => Ok(CryptoMode::MacInterNode),
            "domain_optimized" | "domain" => Ok(CryptoMode::DomainOptimized),
            other => Err(format!("unknown crypto mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageClass {
    ClientRequest,
    InterNode,
    ClientReply,
    ViewChange,
    CheckpointBlockSig,
}

impl MessageClass {
    pub const ALL: [MessageClass; 5] = [
        MessageClass::ClientRequest,
        MessageClass::InterNode,
        MessageClass::ClientReply,
        MessageClass::ViewChange,
        MessageClass::CheckpointBlockSig,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AuthScheme {
    Signature,
    Mac,
    /// No authenticator of this class is produced.
    Absent,
}

/// The policy table. Total over every `(mode, class)` pair.
pub fn required_auth(mode: CryptoMode, class: MessageClass) -> AuthScheme {
    use AuthScheme::*;
    use CryptoMode::*;
    use MessageClass::*;
    match (class, mode) {
        // clients are never trusted with MACs
        (ClientRequest, _) => Signature,
        (InterNode, PkOnly) => Signature,
        (InterNode, MacInterNode | DomainOptimized) => Mac,
        (ClientReply, PkOnly | MacInterNode) => Signature,
        (ClientReply, DomainOptimized) => Mac,
        (ViewChange, _) => Signature,
        (CheckpointBlockSig, DomainOptimized) => Signature,
        (CheckpointBlockSig, PkOnly | MacInterNode) => Absent,
    }
}

/// The scheme an envelope of `kind` carries under `mode`.
///
/// CHECKPOINT messages carry the block signature when the mode produces
/// one and are otherwise ordinary inter-node traffic.
pub fn scheme_for(kind: MessageKind, mode: CryptoMode) -> AuthScheme {
    match kind {
        MessageKind::Request => required_auth(mode, MessageClass::ClientRequest),
        MessageKind::Reply => required_auth(mode, MessageClass::ClientReply),
        MessageKind::ViewChange | MessageKind::NewView => {
            required_auth(mode, MessageClass::ViewChange)
        }
        MessageKind::Checkpoint => match required_auth(mode, MessageClass::CheckpointBlockSig) {
            AuthScheme::Absent => required_auth(mode, MessageClass::InterNode),
            s => s,
        },
        MessageKind::PrePrepare | MessageKind::Prepare | MessageKind::Commit => {
            required_auth(mode, MessageClass::InterNode)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_parse_back() {
        for m in CryptoMode::ALL {
            assert_eq!(m.as_str().parse::<CryptoMode>().unwrap(), m);
        }
        assert!("rot13".parse::<CryptoMode>().is_err());
    }

    #[test]
    fn every_pair_has_a_scheme() {
        for m in CryptoMode::ALL {
            for c in MessageClass::ALL {
                let _ = required_auth(m, c);
            }
            for k in MessageKind::ALL {
                assert_ne!(scheme_for(k, m), AuthScheme::Absent);
            }
        }
    }

    #[test]
    fn checkpoints_follow_block_signature_rule() {
        assert_eq!(
            scheme_for(MessageKind::Checkpoint, CryptoMode::DomainOptimized),
            AuthScheme::Signature
        );
        assert_eq!(
            scheme_for(MessageKind::Checkpoint, CryptoMode::MacInterNode),
            AuthScheme::Mac
        );
        assert_eq!(
            scheme_for(MessageKind::Checkpoint, CryptoMode::PkOnly),
            AuthScheme::Signature
        );
    }
}
