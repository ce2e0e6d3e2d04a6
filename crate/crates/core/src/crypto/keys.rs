//! Key material: signing keys, verification keys and pairwise MAC secrets.
//!
//! A keys directory holds, per identity, `node-<id>.key` / `node-<id>.pub`
//! (or `client-<id>.*`) PEM files, a `pairwise.bin` file with the shared
//! MAC secrets and a `keyring.toml` manifest. `pairwise.bin` is the magic
//! `PBFTMAC1`, a `u32` count, then `[u16 a][u16 b][32-byte secret]`
//! records with `a < b`, all little-endian.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use hmac::{Hmac, Mac};
use openssl::hash::MessageDigest;
use openssl::pkey::{PKey, Private, Public};
use openssl::rsa::Rsa;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use super::Digest;
use crate::wire::NodeId;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("no key material for node {0}")]
    KeyMissing(NodeId),
    #[error("this key store holds no signing key")]
    NoSigningKey,
    #[error("key format: {0}")]
    KeyFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    OpenSsl(#[from] openssl::error::ErrorStack),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureAlgorithm {
    /// RSA-2048, PKCS#1 v1.5 padding over SHA-256. Deterministic.
    Rsa2048,
    /// Ed25519; a fast stand-in for accelerated signing.
    Ed25519,
}

impl fmt::Display for SignatureAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignatureAlgorithm::Rsa2048 => "rsa2048",
            SignatureAlgorithm::Ed25519 => "ed25519",
        })
    }
}

impl FromStr for SignatureAlgorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "rsa2048" | "rsa" => Ok(SignatureAlgorithm::Rsa2048),
            "ed25519" => Ok(SignatureAlgorithm::Ed25519),
            other => Err(format!("unknown signature algorithm `{other}`")),
        }
    }
}

pub trait Signer: Send + Sync {
    fn sign(&self, digest: &Digest) -> Vec<u8>;
}

pub trait SignatureVerifier: Send + Sync {
    fn verify(&self, digest: &Digest, signature: &[u8]) -> bool;
}

#[derive(Clone)]
#[allow(clippy::large_enum_variant)]
pub enum SigningKey {
    Rsa(PKey<Private>),
    Ed25519(ed25519_dalek::SigningKey),
}

#[derive(Clone)]
pub enum VerifyingKey {
    Rsa(PKey<Public>),
    Ed25519(ed25519_dalek::VerifyingKey),
}

const ED_PRIVATE: &str = "ED25519 PRIVATE KEY";
const ED_PUBLIC: &str = "ED25519 PUBLIC KEY";

fn armor(label: &str, bytes: &[u8]) -> String {
    format!(
        "-----BEGIN {label}-----\n{}\n-----END {label}-----\n",
        hex::encode(bytes)
    )
}

fn unarmor(label: &str, text: &str) -> Option<Vec<u8>> {
    let begin = format!("-----BEGIN {label}-----");
    let end = format!("-----END {label}-----");
    let body = text.trim().strip_prefix(&begin)?.strip_suffix(&end)?;
    hex::decode(body.trim()).ok()
}

impl SigningKey {
    /// RSA keys come from the system RNG; Ed25519 keys from `rng`.
    pub fn generate(
        algorithm: SignatureAlgorithm,
        rng: &mut impl RngCore,
    ) -> Result<Self, CryptoError> {
        Ok(match algorithm {
            SignatureAlgorithm::Rsa2048 => SigningKey::Rsa(PKey::from_rsa(Rsa::generate(2048)?)?),
            SignatureAlgorithm::Ed25519 => {
                let mut seed = [0u8; 32];
                rng.fill_bytes(&mut seed);
                SigningKey::Ed25519(ed25519_dalek::SigningKey::from_bytes(&seed))
            }
        })
    }

    pub fn algorithm(&self) -> SignatureAlgorithm {
        match self {
            SigningKey::Rsa(_) => SignatureAlgorithm::Rsa2048,
            SigningKey::Ed25519(_) => SignatureAlgorithm::Ed25519,
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        match self {
            SigningKey::Rsa(k) => {
                let der = k.public_key_to_der().expect("RSA public key encodes");
                VerifyingKey::Rsa(PKey::public_key_from_der(&der).expect("RSA public key decodes"))
            }
            SigningKey::Ed25519(k) => VerifyingKey::Ed25519(k.verifying_key()),
        }
    }

    pub fn to_pem(&self) -> Result<String, CryptoError> {
        Ok(match self {
            SigningKey::Rsa(k) => String::from_utf8(k.private_key_to_pem_pkcs8()?)
                .map_err(|e| CryptoError::KeyFormat(e.to_string()))?,
            SigningKey::Ed25519(k) => armor(ED_PRIVATE, &k.to_bytes()),
        })
    }

    pub fn from_pem(text: &str) -> Result<Self, CryptoError> {
        if let Some(bytes) = unarmor(ED_PRIVATE, text) {
            let seed: [u8; 32] = bytes
                .try_into()
                .map_err(|_| CryptoError::KeyFormat("ed25519 seed must be 32 bytes".into()))?;
            return Ok(SigningKey::Ed25519(ed25519_dalek::SigningKey::from_bytes(
                &seed,
            )));
        }
        let k = PKey::private_key_from_pem(text.as_bytes())?;
        if k.bits() != 2048 {
            return Err(CryptoError::KeyFormat(format!(
                "expected a 2048-bit RSA key, got {}",
                k.bits()
            )));
        }
        Ok(SigningKey::Rsa(k))
    }
}

impl Signer for SigningKey {
    fn sign(&self, digest: &Digest) -> Vec<u8> {
        match self {
            SigningKey::Rsa(k) => {
                let mut s =
                    openssl::sign::Signer::new(MessageDigest::sha256(), k).expect("RSA signer");
                s.update(digest.as_bytes()).expect("RSA update");
                s.sign_to_vec().expect("RSA sign")
            }
            SigningKey::Ed25519(k) => {
                use ed25519_dalek::Signer as _;
                k.sign(digest.as_bytes()).to_bytes().to_vec()
            }
        }
    }
}

impl VerifyingKey {
    pub fn to_pem(&self) -> Result<String, CryptoError> {
        Ok(match self {
            VerifyingKey::Rsa(k) => String::from_utf8(k.public_key_to_pem()?)
                .map_err(|e| CryptoError::KeyFormat(e.to_string()))?,
            VerifyingKey::Ed25519(k) => armor(ED_PUBLIC, k.as_bytes()),
        })
    }

    pub fn from_pem(text: &str) -> Result<Self, CryptoError> {
        if let Some(bytes) = unarmor(ED_PUBLIC, text) {
            let raw: [u8; 32] = bytes.try_into().map_err(|_| {
                CryptoError::KeyFormat("ed25519 public key must be 32 bytes".into())
            })?;
            let k = ed25519_dalek::VerifyingKey::from_bytes(&raw)
                .map_err(|e| CryptoError::KeyFormat(e.to_string()))?;
            return Ok(VerifyingKey::Ed25519(k));
        }
        Ok(VerifyingKey::Rsa(PKey::public_key_from_pem(
            text.as_bytes(),
        )?))
    }
}

impl SignatureVerifier for VerifyingKey {
    fn verify(&self, digest: &Digest, signature: &[u8]) -> bool {
        match self {
            VerifyingKey::Rsa(k) => {
                let Ok(mut v) = openssl::sign::Verifier::new(MessageDigest::sha256(), k) else {
                    return false;
                };
                v.update(digest.as_bytes()).is_ok() && v.verify(signature).unwrap_or(false)
            }
            VerifyingKey::Ed25519(k) => {
                let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
                    return false;
                };
                k.verify_strict(digest.as_bytes(), &sig).is_ok()
            }
        }
    }
}

/// HMAC-SHA-256 keyed with a 256-bit pairwise secret. The keyed state is
/// precomputed once and cloned per tag.
#[derive(Clone)]
pub struct MacKey {
    secret: [u8; 32],
    keyed: Hmac<Sha256>,
}

impl MacKey {
    pub fn new(secret: [u8; 32]) -> Self {
        MacKey {
            secret,
            keyed: Hmac::<Sha256>::new_from_slice(&secret).expect("HMAC accepts any key length"),
        }
    }

    pub fn secret(&self) -> &[u8; 32] {
        &self.secret
    }

    pub fn tag(&self, digest: &Digest) -> [u8; 32] {
        let mut m = self.keyed.clone();
        m.update(digest.as_bytes());
        m.finalize().into_bytes().into()
    }

    pub fn verify(&self, digest: &Digest, tag: &[u8]) -> bool {
        let mut m = self.keyed.clone();
        m.update(digest.as_bytes());
        m.verify_slice(tag).is_ok()
    }
}

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MacKey(..)")
    }
}

/// One identity's view of the key material: its own signing key, everyone's
/// verification keys and the MAC secrets it shares with its peers.
#[derive(Clone)]
pub struct KeyStore {
    id: NodeId,
    signer: Option<Arc<dyn Signer>>,
    verifiers: BTreeMap<NodeId, Arc<dyn SignatureVerifier>>,
    macs: BTreeMap<NodeId, MacKey>,
}

impl fmt::Debug for KeyStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyStore")
            .field("id", &self.id)
            .field("verifiers", &self.verifiers.keys().collect::<Vec<_>>())
            .field("mac_peers", &self.macs.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl KeyStore {
    pub fn new(id: NodeId, signer: Option<Arc<dyn Signer>>) -> Self {
        KeyStore {
            id,
            signer,
            verifiers: BTreeMap::new(),
            macs: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn add_verifier(&mut self, node: NodeId, key: Arc<dyn SignatureVerifier>) {
        self.verifiers.insert(node, key);
    }

    pub fn add_mac_key(&mut self, peer: NodeId, key: MacKey) {
        self.macs.insert(peer, key);
    }

    pub fn mac_peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.macs.keys().copied()
    }

    pub fn has_verifier(&self, node: NodeId) -> bool {
        self.verifiers.contains_key(&node)
    }

    pub fn sign(&self, digest: &Digest) -> Result<Vec<u8>, CryptoError> {
        Ok(self
            .signer
            .as_ref()
            .ok_or(CryptoError::NoSigningKey)?
            .sign(digest))
    }

    pub fn verify_signature(&self, node: NodeId, digest: &Digest, signature: &[u8]) -> bool {
        self.verifiers
            .get(&node)
            .is_some_and(|v| v.verify(digest, signature))
    }

    pub fn mac_key(&self, peer: NodeId) -> Result<&MacKey, CryptoError> {
        self.macs.get(&peer).ok_or(CryptoError::KeyMissing(peer))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    algorithm: SignatureAlgorithm,
    replicas: u16,
    clients: Vec<NodeId>,
}

const PAIRWISE_MAGIC: &[u8; 8] = b"PBFTMAC1";

/// Key material for a whole deployment. Used by `keygen`, tests and
/// in-process runs; production nodes load a [`KeyStore`] from disk instead.
#[derive(Clone)]
pub struct Keyring {
    algorithm: SignatureAlgorithm,
    replicas: u16,
    clients: Vec<NodeId>,
    signing: BTreeMap<NodeId, SigningKey>,
    verifying: BTreeMap<NodeId, VerifyingKey>,
    pairwise: BTreeMap<(NodeId, NodeId), [u8; 32]>,
}

impl fmt::Debug for Keyring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keyring")
            .field("algorithm", &self.algorithm)
            .field("replicas", &self.replicas)
            .field("clients", &self.clients)
            .finish()
    }
}

fn ordered(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Keyring {
    /// Keys for replicas `0..replicas` and the given client ids. MAC
    /// secrets exist for every replica pair and every replica-client pair.
    pub fn generate(
        algorithm: SignatureAlgorithm,
        replicas: u16,
        clients: &[NodeId],
        seed: u64,
    ) -> Result<Self, CryptoError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut signing = BTreeMap::new();
        let mut verifying = BTreeMap::new();
        for id in (0..replicas).chain(clients.iter().copied()) {
            let k = SigningKey::generate(algorithm, &mut rng)?;
            verifying.insert(id, k.verifying_key());
            signing.insert(id, k);
        }
        let mut pairwise = BTreeMap::new();
        for a in 0..replicas {
            for b in (a + 1..replicas).chain(clients.iter().copied()) {
                let mut s = [0u8; 32];
                rng.fill_bytes(&mut s);
                pairwise.insert(ordered(a, b), s);
            }
        }
        Ok(Keyring {
            algorithm,
            replicas,
            clients: clients.to_vec(),
            signing,
            verifying,
            pairwise,
        })
    }

    pub fn algorithm(&self) -> SignatureAlgorithm {
        self.algorithm
    }

    pub fn replicas(&self) -> u16 {
        self.replicas
    }

    pub fn clients(&self) -> &[NodeId] {
        &self.clients
    }

    pub fn keypair_count(&self) -> usize {
        self.signing.len()
    }

    pub fn pairwise_count(&self) -> usize {
        self.pairwise.len()
    }

    pub fn signing_key(&self, id: NodeId) -> Option<&SigningKey> {
        self.signing.get(&id)
    }

    pub fn keystore(&self, id: NodeId) -> Result<KeyStore, CryptoError> {
        let signer = self
            .signing
            .get(&id)
            .ok_or(CryptoError::KeyMissing(id))?
            .clone();
        let mut ks = KeyStore::new(id, Some(Arc::new(signer)));
        for (node, vk) in &self.verifying {
            ks.add_verifier(*node, Arc::new(vk.clone()));
        }
        for ((a, b), s) in &self.pairwise {
            if *a == id {
                ks.add_mac_key(*b, MacKey::new(*s));
            } else if *b == id {
                ks.add_mac_key(*a, MacKey::new(*s));
            }
        }
        Ok(ks)
    }

    fn file_stem(&self, id: NodeId) -> String {
        if id < self.replicas {
            format!("node-{id}")
        } else {
            format!("client-{id}")
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), CryptoError> {
        fs::create_dir_all(dir)?;
        for (id, k) in &self.signing {
            let stem = self.file_stem(*id);
            fs::write(dir.join(format!("{stem}.key")), k.to_pem()?)?;
            fs::write(
                dir.join(format!("{stem}.pub")),
                self.verifying[id].to_pem()?,
            )?;
        }
        let mut bin = Vec::with_capacity(12 + self.pairwise.len() * 36);
        bin.extend_from_slice(PAIRWISE_MAGIC);
        bin.extend_from_slice(&(self.pairwise.len() as u32).to_le_bytes());
        for ((a, b), s) in &self.pairwise {
            bin.extend_from_slice(&a.to_le_bytes());
            bin.extend_from_slice(&b.to_le_bytes());
            bin.extend_from_slice(s);
        }
        fs::write(dir.join("pairwise.bin"), bin)?;
        let manifest = Manifest {
            algorithm: self.algorithm,
            replicas: self.replicas,
            clients: self.clients.clone(),
        };
        fs::write(
            dir.join("keyring.toml"),
            toml::to_string(&manifest).map_err(|e| CryptoError::KeyFormat(e.to_string()))?,
        )?;
        Ok(())
    }

    /// Reads a full keyring back (all private keys included).
    pub fn read_dir(dir: &Path) -> Result<Self, CryptoError> {
        let manifest: Manifest = toml::from_str(&fs::read_to_string(dir.join("keyring.toml"))?)
            .map_err(|e| CryptoError::KeyFormat(e.to_string()))?;
        let mut ring = Keyring {
            algorithm: manifest.algorithm,
            replicas: manifest.replicas,
            clients: manifest.clients,
            signing: BTreeMap::new(),
            verifying: BTreeMap::new(),
            pairwise: read_pairwise(&dir.join("pairwise.bin"))?,
        };
        let ids: Vec<NodeId> = (0..ring.replicas)
            .chain(ring.clients.iter().copied())
            .collect();
        for id in ids {
            let stem = ring.file_stem(id);
            let sk = SigningKey::from_pem(&fs::read_to_string(dir.join(format!("{stem}.key")))?)?;
            let vk = VerifyingKey::from_pem(&fs::read_to_string(dir.join(format!("{stem}.pub")))?)?;
            ring.signing.insert(id, sk);
            ring.verifying.insert(id, vk);
        }
        Ok(ring)
    }
}

fn read_pairwise(path: &Path) -> Result<BTreeMap<(NodeId, NodeId), [u8; 32]>, CryptoError> {
    let bin = fs::read(path)?;
    if bin.len() < 12 || &bin[..8] != PAIRWISE_MAGIC {
        return Err(CryptoError::KeyFormat("pairwise.bin: bad header".into()));
    }
    let count = u32::from_le_bytes(bin[8..12].try_into().unwrap()) as usize;
    if bin.len() != 12 + count * 36 {
        return Err(CryptoError::KeyFormat(
            "pairwise.bin: length mismatch".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for rec in bin[12..].chunks_exact(36) {
        let a = u16::from_le_bytes([rec[0], rec[1]]);
        let b = u16::from_le_bytes([rec[2], rec[3]]);
        out.insert(ordered(a, b), rec[4..].try_into().unwrap());
    }
    Ok(out)
}

impl KeyStore {
    /// Loads the store for `id` from a keys directory. Only `id`'s own
    /// private key is read.
    pub fn load(dir: &Path, id: NodeId) -> Result<Self, CryptoError> {
        let manifest: Manifest = toml::from_str(&fs::read_to_string(dir.join("keyring.toml"))?)
            .map_err(|e| CryptoError::KeyFormat(e.to_string()))?;
        let stem = |n: NodeId| {
            if n < manifest.replicas {
                format!("node-{n}")
            } else {
                format!("client-{n}")
            }
        };
        let key_path = dir.join(format!("{}.key", stem(id)));
        if !key_path.exists() {
            return Err(CryptoError::KeyMissing(id));
        }
        let sk = SigningKey::from_pem(&fs::read_to_string(key_path)?)?;
        let mut ks = KeyStore::new(id, Some(Arc::new(sk)));
        for n in (0..manifest.replicas).chain(manifest.clients.iter().copied()) {
            let vk =
                VerifyingKey::from_pem(&fs::read_to_string(dir.join(format!("{}.pub", stem(n))))?)?;
            ks.add_verifier(n, Arc::new(vk));
        }
        for ((a, b), s) in read_pairwise(&dir.join("pairwise.bin"))? {
            if a == id {
                ks.add_mac_key(b, MacKey::new(s));
            } else if b == id {
                ks.add_mac_key(a, MacKey::new(s));
            }
        }
        Ok(ks)
    }
}
