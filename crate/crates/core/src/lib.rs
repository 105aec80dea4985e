//! Reliable bulk transfer over unreliable datagram links.
//!
//! - [`wire`]: byte layout of the four packet types.
//! - [`engine`]: sans-I/O sender and receiver state machines.
//! - [`crypto`]: sealed packet bodies between peer key pairs.
//! - [`transport`]: deterministic link simulator and a UDP endpoint.
//! - [`bench`]: parameter sweeps and large-transfer evaluation.

pub mod bench;
pub mod crypto;
pub mod engine;
pub mod transport;
pub mod wire;
