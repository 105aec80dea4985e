//! Sans-I/O transfer engine.
//!
//! The engine never touches sockets or clocks. Callers feed it
//! [`EngineEvent`]s in a total order (inbound packets, clock ticks, start and
//! cancel requests) and drain the packets it wants sent with
//! [`Engine::poll_transmit`] and the application notifications with
//! [`Engine::poll_callback`]. Identical event sequences, including tick
//! timestamps and the entropy seed, yield identical outputs.
//!
//! A peer pair carries at most one transfer at a time, in either direction.
//! Each transfer moves a blob as numbered blocks, `window_size` blocks per
//! window. The receiver acknowledges the window once its closing block
//! arrives and lists every block still missing; the sender folds those into
//! the next window instead of stalling, and after the last window keeps
//! resending reported losses until none remain.

mod blocks;
mod params;
mod receiver;
mod scheduler;
mod sender;

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Debug;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::wire::{Acknowledgement, ErrorCode, ErrorPacket, Packet, TransferId, WriteRequest};

pub use blocks::{compute_missing, split_into_blocks, window_count};
pub use params::{
    downscale_window, ParamError, TransferParameters, DEFAULT_BLOCK_SIZE, DEFAULT_MAX_ATTEMPTS,
    DEFAULT_MAX_TRANSFER_SIZE, DEFAULT_MIN_WINDOW, DEFAULT_RETRANSMIT_INTERVAL_MS, DEFAULT_WINDOW_SIZE,
};
pub use receiver::{reassemble, DataOutcome, ReceiverCounters, ReceiverPhase, ReceiverState, ReceiverTick};
pub use scheduler::{ScheduledTransfer, Scheduler};
pub use sender::{Batch, BatchKind, SenderCounters, SenderPhase, SenderState, SenderTick};

/// Completed or failed transfers remembered for late duplicates.
const RECENT_CAPACITY: usize = 64;

/// Peer identifier bound used throughout the engine.
pub trait PeerId: Clone + Ord + Debug {}
impl<T: Clone + Ord + Debug> PeerId for T {}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum StartError {
    #[error("a transfer with this peer is already in progress")]
    Busy,
    #[error("transfer of {size} bytes exceeds the {max}-byte limit")]
    SizeExceeded { size: u64, max: u64 },
    #[error("info tag of {0} bytes is too long")]
    InfoTooLong(usize),
    #[error("metadata of {0} bytes is too long")]
    MetadataTooLong(usize),
    #[error(transparent)]
    InvalidParams(#[from] ParamError),
}

impl StartError {
    /// Wire code matching this refusal, if it has one.
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            StartError::Busy => Some(ErrorCode::Busy),
            StartError::SizeExceeded { .. } => Some(ErrorCode::SizeExceeded),
            _ => None,
        }
    }
}

/// Per-transfer counters reported on completion or failure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferCounters {
    Sender(SenderCounters),
    Receiver(ReceiverCounters),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Completion {
    Sent,
    Received {
        info: String,
        metadata: Vec<u8>,
        data: Vec<u8>,
    },
}

/// Notifications for the application.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Callback<P> {
    Progress {
        id: TransferId,
        peer: P,
        received_blocks: u32,
        block_count: u32,
    },
    Complete {
        id: TransferId,
        peer: P,
        outcome: Completion,
        counters: TransferCounters,
    },
    Errored {
        id: TransferId,
        peer: P,
        code: ErrorCode,
        /// Downscaled parameters for a retry, set when an outgoing transfer timed out.
        retry: Option<TransferParameters>,
        counters: Option<TransferCounters>,
    },
}

#[derive(Clone, Debug)]
pub enum EngineEvent<P> {
    PacketIn { from: P, packet: Packet },
    Tick { now: u64 },
    StartTransfer {
        peer: P,
        info: String,
        data: Vec<u8>,
        params: Option<TransferParameters>,
    },
    Cancel { id: TransferId },
}

#[derive(Clone, Debug, Default)]
pub struct EngineConfig {
    /// Defaults for outgoing transfers; the interval, attempt budget and size
    /// cap also govern incoming ones.
    pub params: TransferParameters,
    /// Keep a log of every data batch each sender emits.
    pub record_batches: bool,
}

/// A transfer that ended without completing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FailedTransfer<P> {
    pub peer: P,
    pub id: TransferId,
    pub code: ErrorCode,
    pub retry: Option<TransferParameters>,
}

#[derive(Debug)]
enum Transfer {
    Sending(SenderState),
    Receiving(ReceiverState),
}

impl Transfer {
    fn id(&self) -> TransferId {
        match self {
            Transfer::Sending(s) => s.id(),
            Transfer::Receiving(r) => r.id(),
        }
    }
}

#[derive(Debug)]
enum RecentReply {
    /// Re-sent for data of a finished incoming transfer.
    FinalAck(Acknowledgement),
    /// Re-sent for a repeated write request we refused.
    Refused(ErrorCode),
    Silent,
}

#[derive(Debug)]
pub struct Engine<P> {
    config: EngineConfig,
    rng: ChaCha8Rng,
    now: u64,
    transfers: BTreeMap<P, Transfer>,
    recent: VecDeque<(P, TransferId, RecentReply)>,
    failed: Vec<FailedTransfer<P>>,
    batches: BTreeMap<TransferId, Vec<Batch>>,
    outbox: VecDeque<(P, Packet)>,
    callbacks: VecDeque<Callback<P>>,
}

impl<P: PeerId> Engine<P> {
    /// `entropy` seeds transfer identifiers and nonces.
    pub fn new(config: EngineConfig, entropy: u64) -> Self {
        Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(entropy),
            now: 0,
            transfers: BTreeMap::new(),
            recent: VecDeque::new(),
            failed: Vec::new(),
            batches: BTreeMap::new(),
            outbox: VecDeque::new(),
            callbacks: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Latest time seen through ticks or event handling.
    pub fn now(&self) -> u64 {
        self.now
    }

    /// Single entry point for callers that drive the engine with events.
    /// Returns the new identifier for `StartTransfer`.
    pub fn handle(&mut self, event: EngineEvent<P>) -> Result<Option<TransferId>, StartError> {
        let now = self.now;
        match event {
            EngineEvent::PacketIn { from, packet } => self.handle_packet(from, packet, now),
            EngineEvent::Tick { now } => self.handle_tick(now),
            EngineEvent::StartTransfer {
                peer,
                info,
                data,
                params,
            } => return self.start_transfer(peer, &info, Vec::new(), data, params, now).map(Some),
            EngineEvent::Cancel { id } => {
                self.cancel(id, now);
            }
        }
        Ok(None)
    }

    /// True when a transfer in either direction is live with `peer`.
    pub fn is_busy(&self, peer: &P) -> bool {
        self.transfers.contains_key(peer)
    }

    pub fn live_transfers(&self) -> usize {
        self.transfers.len()
    }

    /// Draws a fresh identifier not used by any live or recent transfer.
    pub fn reserve_id(&mut self) -> TransferId {
        loop {
            let id = TransferId(self.rng.next_u64());
            let clash = self.transfers.values().any(|t| t.id() == id)
                || self.recent.iter().any(|(_, r, _)| *r == id);
            if !clash {
                return id;
            }
        }
    }

    /// Starts an outgoing transfer and queues its write request.
    pub fn start_transfer(
        &mut self,
        peer: P,
        info: &str,
        metadata: Vec<u8>,
        data: Vec<u8>,
        params: Option<TransferParameters>,
        now: u64,
    ) -> Result<TransferId, StartError> {
        let id = self.reserve_id();
        self.start_transfer_with_id(id, peer, info, metadata, data, params, now)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn start_transfer_with_id(
        &mut self,
        id: TransferId,
        peer: P,
        info: &str,
        metadata: Vec<u8>,
        data: Vec<u8>,
        params: Option<TransferParameters>,
        now: u64,
    ) -> Result<TransferId, StartError> {
        self.now = self.now.max(now);
        if self.is_busy(&peer) {
            return Err(StartError::Busy);
        }
        let params = params.unwrap_or(self.config.params);
        let nonce = self.rng.next_u64();
        let (mut sender, wr) = SenderState::initiate(id, nonce, info, metadata, data, params, now)?;
        if self.config.record_batches {
            sender.record_batches();
        }
        self.outbox.push_back((peer.clone(), Packet::WriteRequest(wr)));
        self.transfers.insert(peer, Transfer::Sending(sender));
        Ok(id)
    }

    /// Aborts a live transfer and tells the peer.
    pub fn cancel(&mut self, id: TransferId, now: u64) -> bool {
        self.now = self.now.max(now);
        let Some(peer) = self.peer_of(id) else {
            return false;
        };
        self.send_error(peer.clone(), id, ErrorCode::Timeout, "cancelled");
        self.fail(&peer, ErrorCode::Timeout, false);
        true
    }

    pub fn handle_packet(&mut self, from: P, packet: Packet, now: u64) {
        self.now = self.now.max(now);
        match packet {
            Packet::WriteRequest(wr) => self.on_write_request(from, wr, now),
            Packet::Acknowledgement(ack) => self.on_ack(from, ack, now),
            Packet::Data(data) => self.on_data(from, data, now),
            Packet::Error(err) => self.on_error(from, err),
        }
    }

    /// Runs every transfer's retransmit timer.
    pub fn handle_tick(&mut self, now: u64) {
        self.now = self.now.max(now);
        let due: Vec<P> = self
            .transfers
            .iter()
            .filter(|(_, t)| match t {
                Transfer::Sending(s) => s.deadline().is_some_and(|d| now >= d),
                Transfer::Receiving(r) => r.deadline().is_some_and(|d| now >= d),
            })
            .map(|(p, _)| p.clone())
            .collect();
        for peer in due {
            let timed_out = match self.transfers.get_mut(&peer) {
                Some(Transfer::Sending(s)) => match s.on_tick(now) {
                    SenderTick::Retransmit(packets) => {
                        self.outbox.extend(packets.into_iter().map(|p| (peer.clone(), p)));
                        false
                    }
                    SenderTick::TimedOut => true,
                    SenderTick::Idle => false,
                },
                Some(Transfer::Receiving(r)) => match r.on_tick(now) {
                    ReceiverTick::Resend(ack) => {
                        self.outbox.push_back((peer.clone(), Packet::Acknowledgement(ack)));
                        false
                    }
                    ReceiverTick::TimedOut => true,
                    ReceiverTick::Idle => false,
                },
                None => false,
            };
            if timed_out {
                let id = self.transfers[&peer].id();
                self.send_error(peer.clone(), id, ErrorCode::Timeout, "timed out");
                self.fail(&peer, ErrorCode::Timeout, true);
            }
        }
    }

    /// Earliest time at which [`Engine::handle_tick`] has work to do.
    pub fn next_deadline(&self) -> Option<u64> {
        self.transfers
            .values()
            .filter_map(|t| match t {
                Transfer::Sending(s) => s.deadline(),
                Transfer::Receiving(r) => r.deadline(),
            })
            .min()
    }

    pub fn poll_transmit(&mut self) -> Option<(P, Packet)> {
        self.outbox.pop_front()
    }

    pub fn poll_callback(&mut self) -> Option<Callback<P>> {
        self.callbacks.pop_front()
    }

    pub fn has_pending_output(&self) -> bool {
        !self.outbox.is_empty()
    }

    pub fn sender(&self, peer: &P) -> Option<&SenderState> {
        match self.transfers.get(peer) {
            Some(Transfer::Sending(s)) => Some(s),
            _ => None,
        }
    }

    pub fn receiver(&self, peer: &P) -> Option<&ReceiverState> {
        match self.transfers.get(peer) {
            Some(Transfer::Receiving(r)) => Some(r),
            _ => None,
        }
    }

    pub fn failed_transfers(&self) -> &[FailedTransfer<P>] {
        &self.failed
    }

    /// Batch log of a finished outgoing transfer, when recording is enabled.
    pub fn take_batches(&mut self, id: TransferId) -> Option<Vec<Batch>> {
        self.batches.remove(&id)
    }

    pub(crate) fn push_callback(&mut self, cb: Callback<P>) {
        self.callbacks.push_back(cb);
    }

    fn peer_of(&self, id: TransferId) -> Option<P> {
        self.transfers
            .iter()
            .find(|(_, t)| t.id() == id)
            .map(|(p, _)| p.clone())
    }

    fn recent_reply(&self, peer: &P, id: TransferId) -> Option<&RecentReply> {
        self.recent
            .iter()
            .find(|(p, r, _)| p == peer && *r == id)
            .map(|(_, _, reply)| reply)
    }

    fn remember(&mut self, peer: P, id: TransferId, reply: RecentReply) {
        if self.recent.len() == RECENT_CAPACITY {
            self.recent.pop_front();
        }
        self.recent.push_back((peer, id, reply));
    }

    fn send_error(&mut self, peer: P, id: TransferId, code: ErrorCode, message: &str) {
        self.outbox.push_back((
            peer,
            Packet::Error(ErrorPacket {
                id,
                code,
                message: message.to_owned(),
            }),
        ));
    }

    fn stash_batches(&mut self, sender: &mut SenderState) {
        if let Some(batches) = sender.take_batches() {
            self.batches.insert(sender.id(), batches);
        }
    }

    /// Removes the live transfer with `peer` and reports it failed.
    fn fail(&mut self, peer: &P, code: ErrorCode, downscale: bool) {
        let Some(transfer) = self.transfers.remove(peer) else {
            return;
        };
        let (id, retry, counters) = match transfer {
            Transfer::Sending(mut s) => {
                s.fail();
                self.stash_batches(&mut s);
                let retry = downscale.then(|| s.retry_parameters());
                (s.id(), retry, TransferCounters::Sender(*s.counters()))
            }
            Transfer::Receiving(mut r) => {
                r.fail();
                (r.id(), None, TransferCounters::Receiver(*r.counters()))
            }
        };
        self.remember(peer.clone(), id, RecentReply::Silent);
        self.failed.push(FailedTransfer {
            peer: peer.clone(),
            id,
            code,
            retry,
        });
        self.callbacks.push_back(Callback::Errored {
            id,
            peer: peer.clone(),
            code,
            retry,
            counters: Some(counters),
        });
    }

    fn refuse(&mut self, peer: P, id: TransferId, code: ErrorCode) {
        self.send_error(peer.clone(), id, code, code.as_str());
        self.remember(peer, id, RecentReply::Refused(code));
    }

    fn on_write_request(&mut self, from: P, wr: WriteRequest, now: u64) {
        match self.transfers.get_mut(&from) {
            Some(Transfer::Receiving(r)) if r.id() == wr.id => {
                let ack = r.on_duplicate_write_request(now);
                self.outbox.push_back((from, Packet::Acknowledgement(ack)));
                return;
            }
            Some(Transfer::Sending(s)) if s.phase() == SenderPhase::AwaitingWriteAck => {
                // Both sides announced at once: neither transfer proceeds.
                self.refuse(from.clone(), wr.id, ErrorCode::Collision);
                self.fail(&from, ErrorCode::Collision, false);
                return;
            }
            Some(_) => {
                self.refuse(from, wr.id, ErrorCode::Busy);
                return;
            }
            None => {}
        }
        match self.recent_reply(&from, wr.id) {
            Some(RecentReply::Refused(code)) => {
                let code = *code;
                self.send_error(from, wr.id, code, code.as_str());
                return;
            }
            Some(_) => return,
            None => {}
        }
        match ReceiverState::accept(&wr, &self.config.params, now) {
            Ok((receiver, ack)) => {
                self.outbox.push_back((from.clone(), Packet::Acknowledgement(ack.clone())));
                if receiver.phase() == ReceiverPhase::Done {
                    self.complete_receiver(from, receiver, ack);
                } else {
                    self.transfers.insert(from, Transfer::Receiving(receiver));
                }
            }
            Err(code) => self.refuse(from, wr.id, code),
        }
    }

    fn on_ack(&mut self, from: P, ack: Acknowledgement, now: u64) {
        let Some(Transfer::Sending(s)) = self.transfers.get_mut(&from) else {
            return self.unknown(from, ack.id);
        };
        if s.id() != ack.id {
            return self.unknown(from, ack.id);
        }
        let packets = s.handle_ack(&ack, now);
        let done = s.phase() == SenderPhase::Done;
        self.outbox
            .extend(packets.into_iter().map(|d| (from.clone(), Packet::Data(d))));
        if done {
            let Some(Transfer::Sending(mut s)) = self.transfers.remove(&from) else {
                unreachable!()
            };
            self.stash_batches(&mut s);
            self.remember(from.clone(), s.id(), RecentReply::Silent);
            self.callbacks.push_back(Callback::Complete {
                id: s.id(),
                peer: from,
                outcome: Completion::Sent,
                counters: TransferCounters::Sender(*s.counters()),
            });
        }
    }

    fn on_data(&mut self, from: P, data: crate::wire::Data, now: u64) {
        let Some(Transfer::Receiving(r)) = self.transfers.get_mut(&from) else {
            return self.unknown(from, data.id);
        };
        if r.id() != data.id {
            return self.unknown(from, data.id);
        }
        let out = r.handle_data(&data, now);
        if out.new_block {
            self.callbacks.push_back(Callback::Progress {
                id: r.id(),
                peer: from.clone(),
                received_blocks: r.received_count(),
                block_count: r.block_count(),
            });
        }
        if let Some(ack) = out.ack {
            self.outbox.push_back((from.clone(), Packet::Acknowledgement(ack.clone())));
            if out.completed {
                let Some(Transfer::Receiving(r)) = self.transfers.remove(&from) else {
                    unreachable!()
                };
                self.complete_receiver(from, r, ack);
            }
        }
    }

    fn complete_receiver(&mut self, peer: P, r: ReceiverState, final_ack: Acknowledgement) {
        let id = r.id();
        let counters = TransferCounters::Receiver(*r.counters());
        let info = r.info().to_owned();
        let metadata = r.metadata().to_vec();
        let data = r.reassemble();
        self.remember(peer.clone(), id, RecentReply::FinalAck(final_ack));
        self.callbacks.push_back(Callback::Complete {
            id,
            peer,
            outcome: Completion::Received { info, metadata, data },
            counters,
        });
    }

    fn on_error(&mut self, from: P, err: ErrorPacket) {
        if self.transfers.get(&from).is_some_and(|t| t.id() == err.id) {
            self.fail(&from, err.code, false);
        }
    }

    /// Answers a packet that matches no live transfer.
    fn unknown(&mut self, from: P, id: TransferId) {
        match self.recent_reply(&from, id) {
            Some(RecentReply::FinalAck(ack)) => {
                let ack = ack.clone();
                self.outbox.push_back((from, Packet::Acknowledgement(ack)));
            }
            Some(_) => {}
            None => self.send_error(from, id, ErrorCode::UnknownTransfer, "unknown transfer"),
        }
    }
}
