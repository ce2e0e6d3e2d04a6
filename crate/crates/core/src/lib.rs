//! Core of a PBFT-style replicated state machine with configurable
//! authentication: message codec, crypto policy, the replica and client
//! state machines, and a deterministic network simulator.

pub mod client;
pub mod crypto;
pub mod message;
pub mod replica;
pub mod sim;
pub mod wire;
