//! Hashing, authentication policy and key handling.

mod auth;
mod digest;
mod keys;
mod policy;

pub use auth::{
    authenticate, authenticate_digest, hash_incoming, seal, verify_auth, verify_detached,
    verify_embedded, verify_embedded_with, verify_incoming, Authenticator, BatchCache,
    RejectReason, Verdict, TAG_LEN,
};
pub use digest::{digest, envelope_digest, Digest, Hasher};
pub use keys::{
    CryptoError, KeyStore, Keyring, MacKey, SignatureAlgorithm, SignatureVerifier, Signer,
    SigningKey, VerifyingKey,
};
pub use policy::{required_auth, scheme_for, AuthScheme, CryptoMode, MessageClass};
