//! Carriers for engine packets: a deterministic simulator and real UDP.

pub mod sim;
#[cfg(feature = "udp")]
pub mod udp;

use thiserror::Error;

pub use sim::{Delivery, Fate, LinkModel, NodeId, SimClock, SimConfig, SimCounters, SimLink, Simulation, TraceEntry};
#[cfg(feature = "udp")]
pub use udp::{StepOutput, UdpDriver, UdpEndpoint};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("datagram of {len} bytes exceeds the path MTU")]
    Mtu { len: usize },
    #[error("invalid link model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
