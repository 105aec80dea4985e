use bitvec::vec::BitVec;

use crate::wire::{Acknowledgement, Data, ErrorCode, TransferId, WriteRequest, MAX_UNRECEIVED};

use super::blocks::{block_range, missing_from, window_blocks, window_count};
use super::params::TransferParameters;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReceiverPhase {
    Receiving,
    Done,
    Failed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReceiverCounters {
    pub acks_sent: u64,
    pub retransmitted_acks: u64,
    pub data_packets_received: u64,
    pub duplicate_blocks: u64,
    pub invalid_packets: u64,
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct DataOutcome {
    pub ack: Option<Acknowledgement>,
    pub new_block: bool,
    pub completed: bool,
}

#[derive(Debug, PartialEq, Eq)]
pub enum ReceiverTick {
    Idle,
    Resend(Acknowledgement),
    TimedOut,
}

/// Receiving half of one transfer. The blob is rebuilt in place in a buffer
/// sized from the announced data size.
#[derive(Debug)]
pub struct ReceiverState {
    id: TransferId,
    info: String,
    metadata: Vec<u8>,
    data_size: u64,
    block_size: u32,
    window_size: u32,
    block_count: u32,
    window_count: u32,
    received: BitVec,
    received_count: u32,
    first_missing: u32,
    buffer: Vec<u8>,
    expected_window: u32,
    last_ack: Acknowledgement,
    /// Closing block of the most recently acknowledged window.
    prev_closing: Option<u32>,
    attempts_left: u32,
    max_attempts: u32,
    retransmit_interval_ms: u64,
    last_ack_time: u64,
    phase: ReceiverPhase,
    counters: ReceiverCounters,
}

impl ReceiverState {
    /// Accepts a write request. `local` supplies this side's size cap,
    /// retransmit interval and attempt budget.
    pub fn accept(
        wr: &WriteRequest,
        local: &TransferParameters,
        now: u64,
    ) -> Result<(Self, Acknowledgement), ErrorCode> {
        if wr.data_size > local.max_transfer_size {
            return Err(ErrorCode::SizeExceeded);
        }
        let ack = Acknowledgement {
            id: wr.id,
            window_index: 0,
            unreceived: Vec::new(),
        };
        let state = Self {
            id: wr.id,
            info: wr.info.clone(),
            metadata: wr.metadata.clone(),
            data_size: wr.data_size,
            block_size: wr.block_size,
            window_size: wr.window_size,
            block_count: wr.block_count,
            window_count: window_count(wr.block_count, wr.window_size),
            received: BitVec::repeat(false, wr.block_count as usize),
            received_count: 0,
            first_missing: 0,
            buffer: vec![0; wr.data_size as usize],
            expected_window: 0,
            last_ack: ack.clone(),
            prev_closing: None,
            attempts_left: local.max_attempts,
            max_attempts: local.max_attempts,
            retransmit_interval_ms: local.retransmit_interval_ms,
            last_ack_time: now,
            phase: if wr.block_count == 0 {
                ReceiverPhase::Done
            } else {
                ReceiverPhase::Receiving
            },
            counters: ReceiverCounters {
                acks_sent: 1,
                ..Default::default()
            },
        };
        Ok((state, ack))
    }

    pub fn id(&self) -> TransferId {
        self.id
    }

    pub fn info(&self) -> &str {
        &self.info
    }

    pub fn metadata(&self) -> &[u8] {
        &self.metadata
    }

    pub fn phase(&self) -> ReceiverPhase {
        self.phase
    }

    pub fn block_count(&self) -> u32 {
        self.block_count
    }

    pub fn received_count(&self) -> u32 {
        self.received_count
    }

    pub fn received(&self) -> &bitvec::slice::BitSlice {
        &self.received
    }

    pub fn expected_window(&self) -> u32 {
        self.expected_window
    }

    pub fn attempts_left(&self) -> u32 {
        self.attempts_left
    }

    pub fn last_ack(&self) -> &Acknowledgement {
        &self.last_ack
    }

    pub fn counters(&self) -> &ReceiverCounters {
        &self.counters
    }

    /// Heap held by this transfer: the reassembly buffer plus bookkeeping.
    pub fn heap_bytes(&self) -> usize {
        self.buffer.capacity()
            + self.received.capacity().div_ceil(8)
            + self.last_ack.unreceived.capacity() * 4
            + self.info.capacity()
            + self.metadata.capacity()
    }

    pub fn deadline(&self) -> Option<u64> {
        (self.phase == ReceiverPhase::Receiving).then(|| self.last_ack_time + self.retransmit_interval_ms)
    }

    /// The block whose arrival closes the window currently in flight.
    fn closing_block(&self) -> Option<u32> {
        if self.phase != ReceiverPhase::Receiving {
            None
        } else if self.expected_window < self.window_count {
            Some(window_blocks(self.expected_window, self.window_size, self.block_count).end - 1)
        } else {
            self.last_ack.unreceived.last().copied()
        }
    }

    /// Acknowledgement announcing `next_window`, listing what is missing
    /// below the end of the window before it.
    fn window_ack(&self, next_window: u32) -> Acknowledgement {
        let unreceived = match next_window.checked_sub(1) {
            Some(done) => {
                // The just-closed window's gaps take precedence; older gaps
                // fill whatever room is left, lowest first.
                let limit = (self.window_size as usize).min(MAX_UNRECEIVED);
                let start = window_blocks(done, self.window_size, self.block_count).start;
                let recent = missing_from(&self.received, start, done, self.window_size, self.block_count, limit);
                let older = self.first_missing as usize..start.max(self.first_missing) as usize;
                let mut list: Vec<u32> = self.received[older]
                    .iter_zeros()
                    .take(limit - recent.len())
                    .map(|i| i as u32 + self.first_missing)
                    .collect();
                list.extend(recent);
                list
            }
            None => Vec::new(),
        };
        Acknowledgement {
            id: self.id,
            window_index: next_window,
            unreceived,
        }
    }

    fn record_ack(&mut self, ack: &Acknowledgement, now: u64, retransmission: bool) {
        self.last_ack = ack.clone();
        self.last_ack_time = now;
        self.counters.acks_sent += 1;
        if retransmission {
            self.counters.retransmitted_acks += 1;
        }
    }

    /// Stores a data block and decides whether to acknowledge.
    ///
    /// Blocks with an out-of-range number or a wrong payload length are
    /// dropped and counted as invalid.
    pub fn handle_data(&mut self, d: &Data, now: u64) -> DataOutcome {
        if d.id != self.id || self.phase != ReceiverPhase::Receiving {
            return DataOutcome::default();
        }
        let block = d.block_number;
        if block >= self.block_count {
            self.counters.invalid_packets += 1;
            return DataOutcome::default();
        }
        let range = block_range(block, self.block_size, self.data_size);
        if d.payload.len() != range.len() {
            self.counters.invalid_packets += 1;
            return DataOutcome::default();
        }
        self.attempts_left = self.max_attempts;
        self.counters.data_packets_received += 1;

        let new_block = !self.received[block as usize];
        if new_block {
            self.received.set(block as usize, true);
            self.buffer[range].copy_from_slice(&d.payload);
            self.received_count += 1;
            if block == self.first_missing {
                self.first_missing = self.received[block as usize..]
                    .first_zero()
                    .map_or(self.block_count, |i| block + i as u32);
            }
        } else {
            self.counters.duplicate_blocks += 1;
        }

        let mut ack = None;
        if Some(block) == self.closing_block() {
            let next = (self.expected_window + 1).min(self.window_count);
            ack = Some((self.window_ack(next), false));
            self.expected_window = next;
            self.prev_closing = Some(block);
        } else if Some(block) == self.prev_closing {
            // The sender is repeating a window we already acknowledged.
            ack = Some((self.window_ack(self.last_ack.window_index), true));
        }

        let completed = self.received_count == self.block_count;
        if completed {
            self.phase = ReceiverPhase::Done;
            self.expected_window = self.window_count;
            let final_ack = self.window_ack(self.window_count);
            debug_assert!(final_ack.unreceived.is_empty());
            let retransmission = ack.as_ref().is_some_and(|(_, r)| *r);
            ack = Some((final_ack, retransmission));
        }
        let ack = ack.map(|(a, retransmission)| {
            self.record_ack(&a, now, retransmission);
            a
        });
        DataOutcome {
            ack,
            new_block,
            completed,
        }
    }

    /// Re-acknowledges a repeated write request.
    pub fn on_duplicate_write_request(&mut self, now: u64) -> Acknowledgement {
        self.attempts_left = self.max_attempts;
        self.counters.acks_sent += 1;
        self.counters.retransmitted_acks += 1;
        if self.last_ack.window_index == 0 {
            self.last_ack_time = now;
        }
        Acknowledgement {
            id: self.id,
            window_index: 0,
            unreceived: Vec::new(),
        }
    }

    /// Fires the receiver-side retransmit timer.
    ///
    /// If part of the expected window has arrived, the window is closed and
    /// acknowledged (its closing block counts as missing); otherwise the last
    /// acknowledgement is repeated with a refreshed unreceived list.
    pub fn on_tick(&mut self, now: u64) -> ReceiverTick {
        match self.deadline() {
            Some(deadline) if now >= deadline => {}
            _ => return ReceiverTick::Idle,
        }
        self.attempts_left = self.attempts_left.saturating_sub(1);
        if self.attempts_left == 0 {
            self.phase = ReceiverPhase::Failed;
            return ReceiverTick::TimedOut;
        }
        let window = window_blocks(self.expected_window, self.window_size, self.block_count);
        let ack = if self.expected_window < self.window_count
            && self.received[window.start as usize..window.end as usize].any()
        {
            self.expected_window += 1;
            self.prev_closing = Some(window.end - 1);
            self.window_ack(self.expected_window)
        } else {
            self.window_ack(self.last_ack.window_index)
        };
        self.record_ack(&ack, now, true);
        ReceiverTick::Resend(ack)
    }

    pub fn fail(&mut self) {
        self.phase = ReceiverPhase::Failed;
    }

    /// Returns the rebuilt blob. Must only be called once the transfer is done.
    pub fn reassemble(self) -> Vec<u8> {
        assert_eq!(self.phase, ReceiverPhase::Done, "reassemble before completion");
        self.buffer
    }
}

/// Free-function form of [`ReceiverState::reassemble`].
pub fn reassemble(state: ReceiverState) -> Vec<u8> {
    state.reassemble()
}
