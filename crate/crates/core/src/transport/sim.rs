//! Deterministic discrete-event link simulator.
//!
//! Every ordered node pair has its own [`SimLink`] with a seeded generator.
//! Each send consumes the same six draws in a fixed order (loss, jitter,
//! reorder, reorder depth, duplicate, duplicate jitter), so a given model,
//! seed and event script always produces the same delivery schedule.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crypto::{Cipher, IdentityCipher};
use crate::engine::{Callback, Engine, EngineConfig};
use crate::wire::{Packet, MAX_DATAGRAM};

use super::TransportError;

/// Deepest a reordered datagram may jump ahead of earlier ones due at the same instant.
const MAX_REORDER_DEPTH: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkModel {
    pub loss_probability: f64,
    pub latency_base_ms: u64,
    /// Uniform jitter applied as `base ± jitter`.
    pub latency_jitter_ms: u64,
    pub reorder_probability: f64,
    pub duplicate_probability: f64,
    pub seed: u64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            loss_probability: 0.0,
            latency_base_ms: 20,
            latency_jitter_ms: 0,
            reorder_probability: 0.0,
            duplicate_probability: 0.0,
            seed: 0,
        }
    }
}

impl LinkModel {
    pub fn lossless(latency_base_ms: u64) -> Self {
        Self {
            latency_base_ms,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        for (name, p) in [
            ("loss", self.loss_probability),
            ("reorder", self.reorder_probability),
            ("duplicate", self.duplicate_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TransportError::InvalidModel(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One scheduled arrival. `rank` breaks ties between arrivals due at the
/// same millisecond; reordered datagrams get a smaller rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Delivery {
    pub at: u64,
    pub rank: i64,
}

/// One direction of a simulated link.
#[derive(Debug)]
pub struct SimLink {
    model: LinkModel,
    rng: ChaCha8Rng,
    sends: u64,
}

impl SimLink {
    pub fn new(model: LinkModel) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            sends: 0,
        }
    }

    pub fn model(&self) -> &LinkModel {
        &self.model
    }

    fn latency(&self, draw: u64) -> u64 {
        let jitter = self.model.latency_jitter_ms;
        (self.model.latency_base_ms + draw).saturating_sub(jitter)
    }

    /// Schedules a datagram of `len` bytes sent at `now`.
    pub fn sim_send(&mut self, len: usize, now: u64) -> Result<Vec<Delivery>, TransportError> {
        if len > MAX_DATAGRAM {
            return Err(TransportError::Mtu { len });
        }
        let span = 2 * self.model.latency_jitter_ms;
        let lost = self.rng.random::<f64>() < self.model.loss_probability;
        let jitter = self.rng.random_range(0..=span);
        let reorder = self.rng.random::<f64>() < self.model.reorder_probability;
        let depth = self.rng.random_range(1..=MAX_REORDER_DEPTH) as i64;
        let duplicate = self.rng.random::<f64>() < self.model.duplicate_probability;
        let dup_jitter = self.rng.random_range(0..=span);

        let seq = self.sends as i64;
        self.sends += 1;
        if lost {
            return Ok(Vec::new());
        }
        let rank = if reorder { seq - depth } else { seq };
        let mut out = vec![Delivery {
            at: now + self.latency(jitter),
            rank,
        }];
        if duplicate {
            out.push(Delivery {
                at: now + self.latency(dup_jitter),
                rank: seq,
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, PartialEq, Eq)]
struct InFlight {
    delivery: Delivery,
    seq: u64,
    from: NodeId,
    to: NodeId,
    bytes: Vec<u8>,
}

impl Ord for InFlight {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.delivery, self.seq).cmp(&(other.delivery, other.seq))
    }
}

impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Simulated time and pending arrivals.
#[derive(Debug, Default)]
pub struct SimClock {
    now: u64,
    queue: BinaryHeap<Reverse<InFlight>>,
    seq: u64,
}

impl SimClock {
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    fn next_arrival(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(f)| f.delivery.at)
    }

    fn push(&mut self, delivery: Delivery, from: NodeId, to: NodeId, bytes: Vec<u8>) {
        self.seq += 1;
        self.queue.push(Reverse(InFlight {
            delivery,
            seq: self.seq,
            from,
            to,
            bytes,
        }));
    }

    fn pop_due(&mut self) -> Option<InFlight> {
        match self.queue.peek() {
            Some(Reverse(f)) if f.delivery.at <= self.now => self.queue.pop().map(|Reverse(f)| f),
            _ => None,
        }
    }

    fn advance(&mut self, to: u64) {
        debug_assert!(to >= self.now, "time never decreases");
        self.now = self.now.max(to);
    }
}

/// Fate of one sent datagram.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Fate {
    Dropped,
    Delivered(Vec<u64>),
    Rejected,
}

/// One datagram handed to the simulated network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub time: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub packet: Packet,
    pub bytes: Vec<u8>,
    pub fate: Fate,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>8} {}->{} {:<15} ", self.time, self.from, self.to, self.packet.kind())?;
        match &self.fate {
            Fate::Dropped => f.write_str("dropped")?,
            Fate::Rejected => f.write_str("rejected")?,
            Fate::Delivered(at) => {
                let at: Vec<String> = at.iter().map(u64::to_string).collect();
                write!(f, "at {}", at.join(","))?
            }
        }
        if !f.alternate() {
            f.write_str(" ")?;
            for b in &self.bytes {
                write!(f, "{b:02x}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct SimConfig {
    pub link: LinkModel,
    /// Extra bytes counted against the MTU for every datagram, emulating a
    /// heavier overlay header.
    pub header_tax: usize,
    /// Record every datagram in [`Simulation::trace`].
    pub trace: bool,
    /// Keep progress callbacks in the event log.
    pub keep_progress: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimCounters {
    pub datagrams_sent: u64,
    pub datagrams_dropped: u64,
    pub datagrams_delivered: u64,
    pub mtu_rejections: u64,
    pub undecodable: u64,
}

pub struct SimNode {
    pub engine: Engine<NodeId>,
    cipher: Box<dyn Cipher + Send>,
}

/// Several engines joined by simulated links.
pub struct Simulation {
    config: SimConfig,
    nodes: Vec<SimNode>,
    links: std::collections::BTreeMap<(NodeId, NodeId), SimLink>,
    clock: SimClock,
    partitioned: bool,
    trace: Vec<TraceEntry>,
    events: Vec<(u64, NodeId, Callback<NodeId>)>,
    counters: SimCounters,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Self {
        Self {
            config,
            nodes: Vec::new(),
            links: Default::default(),
            clock: SimClock::default(),
            partitioned: false,
            trace: Vec::new(),
            events: Vec::new(),
            counters: SimCounters::default(),
        }
    }

    /// Adds a node with a plaintext cipher.
    pub fn add_node(&mut self, config: EngineConfig, entropy: u64) -> NodeId {
        self.add_node_with_cipher(config, entropy, Box::new(IdentityCipher))
    }

    pub fn add_node_with_cipher(
        &mut self,
        config: EngineConfig,
        entropy: u64,
        cipher: Box<dyn Cipher + Send>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(SimNode {
            engine: Engine::new(config, entropy),
            cipher,
        });
        id
    }

    pub fn now(&self) -> u64 {
        self.clock.now
    }

    pub fn engine(&self, node: NodeId) -> &Engine<NodeId> {
        &self.nodes[node.0 as usize].engine
    }

    pub fn engine_mut(&mut self, node: NodeId) -> &mut Engine<NodeId> {
        &mut self.nodes[node.0 as usize].engine
    }

    /// Drops every datagram while set.
    pub fn set_partitioned(&mut self, partitioned: bool) {
        self.partitioned = partitioned;
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// Callbacks raised so far, with the time and node that raised them.
    pub fn events(&self) -> &[(u64, NodeId, Callback<NodeId>)] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<(u64, NodeId, Callback<NodeId>)> {
        std::mem::take(&mut self.events)
    }

    pub fn counters(&self) -> &SimCounters {
        &self.counters
    }

    fn link(&mut self, from: NodeId, to: NodeId) -> &mut SimLink {
        let base = self.config.link;
        self.links.entry((from, to)).or_insert_with(|| {
            let seed = base
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(u64::from(from.0) << 32 | u64::from(to.0));
            SimLink::new(LinkModel { seed, ..base })
        })
    }

    /// Moves queued packets and callbacks out of every engine.
    pub fn flush(&mut self) {
        let now = self.clock.now;
        for index in 0..self.nodes.len() {
            let from = NodeId(index as u32);
            while let Some(cb) = self.nodes[index].engine.poll_callback() {
                if self.config.keep_progress || !matches!(cb, Callback::Progress { .. }) {
                    self.events.push((now, from, cb));
                }
            }
            while let Some((to, packet)) = self.nodes[index].engine.poll_transmit() {
                let bytes = self.nodes[index].cipher.seal(&packet.encode());
                self.counters.datagrams_sent += 1;
                let partitioned = self.partitioned;
                let tax = self.config.header_tax;
                let fate = match self.link(from, to).sim_send(bytes.len() + tax, now) {
                    Err(_) => {
                        self.counters.mtu_rejections += 1;
                        Fate::Rejected
                    }
                    Ok(_) if partitioned => Fate::Dropped,
                    Ok(deliveries) if deliveries.is_empty() => Fate::Dropped,
                    Ok(deliveries) => {
                        let times = deliveries.iter().map(|d| d.at).collect();
                        for d in deliveries {
                            self.clock.push(d, from, to, bytes.clone());
                        }
                        Fate::Delivered(times)
                    }
                };
                if fate == Fate::Dropped {
                    self.counters.datagrams_dropped += 1;
                }
                if self.config.trace {
                    self.trace.push(TraceEntry {
                        time: now,
                        from,
                        to,
                        packet,
                        bytes,
                        fate,
                    });
                }
            }
        }
    }

    /// Time of the next arrival or timer, if anything is left to do.
    pub fn next_event_time(&self) -> Option<u64> {
        let timers = self.nodes.iter().filter_map(|n| n.engine.next_deadline()).min();
        match (self.clock.next_arrival(), timers) {
            (Some(a), Some(t)) => Some(a.min(t)),
            (a, t) => a.or(t),
        }
    }

    /// Advances to the next event and processes everything due then.
    /// Returns false when nothing is left.
    pub fn step(&mut self) -> bool {
        self.flush();
        let Some(at) = self.next_event_time() else {
            return false;
        };
        self.clock.advance(at);
        let now = self.clock.now;
        while let Some(f) = self.clock.pop_due() {
            self.counters.datagrams_delivered += 1;
            let node = &mut self.nodes[f.to.0 as usize];
            match node.cipher.open(&f.bytes).ok().and_then(|b| Packet::decode(&b).ok()) {
                Some(packet) => node.engine.handle_packet(f.from, packet, now),
                None => self.counters.undecodable += 1,
            }
        }
        for node in &mut self.nodes {
            node.engine.handle_tick(now);
        }
        self.flush();
        true
    }

    /// Runs until nothing is left to do or simulated time passes `limit`.
    pub fn run(&mut self, limit: u64) {
        while self.next_event_time().is_some_and(|t| t <= limit) {
            self.step();
        }
        self.flush();
    }

    /// Runs until `done` holds, nothing is left, or time passes `limit`.
    pub fn run_until(&mut self, limit: u64, mut done: impl FnMut(&Simulation) -> bool) {
        self.flush();
        while !done(self) && self.next_event_time().is_some_and(|t| t <= limit) {
            self.step();
        }
    }
}
