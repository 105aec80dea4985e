use crate::wire::{Acknowledgement, Data, Packet, TransferId, WriteRequest, MAX_INFO_LEN, MAX_METADATA_LEN};

use super::blocks::{block_range, window_blocks, window_count};
use super::params::TransferParameters;
use super::StartError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SenderPhase {
    AwaitingWriteAck,
    Sending,
    /// Every window has gone out; only reported-missing blocks are resent.
    LastWindowDrain,
    Done,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchKind {
    /// Fresh blocks of a window plus piggybacked losses.
    Window,
    /// Reported losses after the last window.
    Drain,
    /// Timer-driven resend of the previous batch.
    Retransmit,
}

/// One burst of data packets, recorded when batch recording is enabled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub window_index: u32,
    pub kind: BatchKind,
    pub blocks: Vec<u32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SenderCounters {
    pub data_packets_sent: u64,
    pub fresh_blocks_sent: u64,
    /// Entries of every acted-upon unreceived list; each one is resent once.
    pub lost_blocks: u64,
    pub retransmitted_windows: u64,
    pub retransmitted_window_blocks: u64,
    pub write_request_retransmits: u64,
    pub acks_received: u64,
    pub stale_acks: u64,
}

#[derive(Debug, PartialEq, Eq)]
pub enum SenderTick {
    Idle,
    Retransmit(Vec<Packet>),
    TimedOut,
}

/// Sending half of one transfer.
#[derive(Debug)]
pub struct SenderState {
    write_request: WriteRequest,
    data: Vec<u8>,
    params: TransferParameters,
    window_count: u32,
    window_index: u32,
    pending: Vec<u32>,
    phase: SenderPhase,
    attempts_left: u32,
    last_send_time: u64,
    counters: SenderCounters,
    batches: Option<Vec<Batch>>,
}

impl SenderState {
    /// Builds the state for a new outgoing transfer together with the write
    /// request that announces it.
    pub fn initiate(
        id: TransferId,
        nonce: u64,
        info: &str,
        metadata: Vec<u8>,
        data: Vec<u8>,
        params: TransferParameters,
        now: u64,
    ) -> Result<(Self, WriteRequest), StartError> {
        params.validate()?;
        if info.len() > MAX_INFO_LEN {
            return Err(StartError::InfoTooLong(info.len()));
        }
        if metadata.len() > MAX_METADATA_LEN {
            return Err(StartError::MetadataTooLong(metadata.len()));
        }
        let size = data.len() as u64;
        if size > params.max_transfer_size {
            return Err(StartError::SizeExceeded {
                size,
                max: params.max_transfer_size,
            });
        }
        let block_count = crate::wire::block_count_for(size, params.block_size).ok_or(
            StartError::SizeExceeded {
                size,
                max: u64::from(u32::MAX) * u64::from(params.block_size),
            },
        )?;
        let write_request = WriteRequest {
            id,
            info: info.to_owned(),
            data_size: size,
            block_size: params.block_size,
            window_size: params.window_size,
            block_count,
            nonce,
            metadata,
        };
        let state = Self {
            write_request: write_request.clone(),
            data,
            params,
            window_count: window_count(block_count, params.window_size),
            window_index: 0,
            pending: Vec::new(),
            phase: SenderPhase::AwaitingWriteAck,
            attempts_left: params.max_attempts,
            last_send_time: now,
            counters: SenderCounters::default(),
            batches: None,
        };
        Ok((state, write_request))
    }

    pub fn record_batches(&mut self) {
        self.batches.get_or_insert_with(Vec::new);
    }

    pub fn id(&self) -> TransferId {
        self.write_request.id
    }

    pub fn phase(&self) -> SenderPhase {
        self.phase
    }

    pub fn params(&self) -> &TransferParameters {
        &self.params
    }

    pub fn write_request(&self) -> &WriteRequest {
        &self.write_request
    }

    pub fn block_count(&self) -> u32 {
        self.write_request.block_count
    }

    pub fn window_index(&self) -> u32 {
        self.window_index
    }

    pub fn pending(&self) -> &[u32] {
        &self.pending
    }

    pub fn attempts_left(&self) -> u32 {
        self.attempts_left
    }

    pub fn counters(&self) -> &SenderCounters {
        &self.counters
    }

    pub fn batches(&self) -> Option<&[Batch]> {
        self.batches.as_deref()
    }

    pub fn take_batches(&mut self) -> Option<Vec<Batch>> {
        self.batches.take()
    }

    pub fn is_live(&self) -> bool {
        matches!(
            self.phase,
            SenderPhase::AwaitingWriteAck | SenderPhase::Sending | SenderPhase::LastWindowDrain
        )
    }

    /// Time at which [`SenderState::on_tick`] will next act.
    pub fn deadline(&self) -> Option<u64> {
        self.is_live()
            .then(|| self.last_send_time + self.params.retransmit_interval_ms)
    }

    /// Applies an acknowledgement and returns the data packets to send next.
    ///
    /// Acknowledgements for a window other than the one in flight are stale
    /// and only refresh the attempt budget.
    pub fn handle_ack(&mut self, ack: &Acknowledgement, now: u64) -> Vec<Data> {
        if ack.id != self.id() || !self.is_live() {
            return Vec::new();
        }
        let sent_end = match self.phase {
            SenderPhase::AwaitingWriteAck => 0,
            SenderPhase::Sending => window_blocks(self.window_index, self.params.window_size, self.block_count()).end,
            _ => self.block_count(),
        };
        if ack.unreceived.last().is_some_and(|&b| b >= sent_end) {
            return Vec::new();
        }
        self.attempts_left = self.params.max_attempts;
        self.counters.acks_received += 1;

        let expected = match self.phase {
            SenderPhase::AwaitingWriteAck => 0,
            SenderPhase::Sending => self.window_index + 1,
            _ => self.window_count,
        };
        if ack.window_index != expected {
            self.counters.stale_acks += 1;
            return Vec::new();
        }
        if self.phase == SenderPhase::AwaitingWriteAck && self.window_count == 0 {
            self.phase = SenderPhase::Done;
            return Vec::new();
        }

        self.counters.lost_blocks += ack.unreceived.len() as u64;
        if expected < self.window_count {
            let fresh = window_blocks(expected, self.params.window_size, self.block_count());
            self.counters.fresh_blocks_sent += u64::from(fresh.end - fresh.start);
            self.pending.clear();
            self.pending.extend_from_slice(&ack.unreceived);
            self.pending.extend(fresh);
            self.window_index = expected;
            self.phase = SenderPhase::Sending;
            self.emit(BatchKind::Window, now)
        } else if ack.unreceived.is_empty() {
            self.pending.clear();
            self.phase = SenderPhase::Done;
            Vec::new()
        } else {
            self.pending.clear();
            self.pending.extend_from_slice(&ack.unreceived);
            self.window_index = self.window_count;
            self.phase = SenderPhase::LastWindowDrain;
            self.emit(BatchKind::Drain, now)
        }
    }

    /// Retransmits the awaited unit once the interval has elapsed, or fails
    /// the transfer when the attempt budget is spent.
    pub fn on_tick(&mut self, now: u64) -> SenderTick {
        match self.deadline() {
            Some(deadline) if now >= deadline => {}
            _ => return SenderTick::Idle,
        }
        self.attempts_left = self.attempts_left.saturating_sub(1);
        if self.attempts_left == 0 {
            self.phase = SenderPhase::Failed;
            return SenderTick::TimedOut;
        }
        if self.phase == SenderPhase::AwaitingWriteAck {
            self.counters.write_request_retransmits += 1;
            self.last_send_time = now;
            return SenderTick::Retransmit(vec![Packet::WriteRequest(self.write_request.clone())]);
        }
        self.counters.retransmitted_windows += 1;
        self.counters.retransmitted_window_blocks += self.pending.len() as u64;
        SenderTick::Retransmit(
            self.emit(BatchKind::Retransmit, now)
                .into_iter()
                .map(Packet::Data)
                .collect(),
        )
    }

    pub fn fail(&mut self) {
        self.phase = SenderPhase::Failed;
    }

    /// Parameters to use when the caller retries after a timeout.
    pub fn retry_parameters(&self) -> TransferParameters {
        self.params.downscale_window()
    }

    fn emit(&mut self, kind: BatchKind, now: u64) -> Vec<Data> {
        self.last_send_time = now;
        self.counters.data_packets_sent += self.pending.len() as u64;
        if let Some(batches) = &mut self.batches {
            batches.push(Batch {
                window_index: self.window_index,
                kind,
                blocks: self.pending.clone(),
            });
        }
        let id = self.id();
        let (block_size, data_size) = (self.params.block_size, self.write_request.data_size);
        self.pending
            .iter()
            .map(|&block| Data {
                id,
                block_number: block,
                payload: self.data[block_range(block, block_size, data_size)].to_vec(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(window_size: u32) -> TransferParameters {
        TransferParameters {
            window_size,
            min_window: 1,
            max_attempts: 3,
            retransmit_interval_ms: 100,
            ..Default::default()
        }
    }

    fn sender(size: usize, window: u32) -> SenderState {
        let data: Vec<u8> = (0..size).map(|i| i as u8).collect();
        SenderState::initiate(TransferId(5), 1, "t", vec![], data, params(window), 0)
            .unwrap()
            .0
    }

    fn ack(window_index: u32, unreceived: Vec<u32>) -> Acknowledgement {
        Acknowledgement {
            id: TransferId(5),
            window_index,
            unreceived,
        }
    }

    fn blocks(d: &[Data]) -> Vec<u32> {
        d.iter().map(|d| d.block_number).collect()
    }

    #[test]
    fn write_request_fields() {
        let (_, wr) = SenderState::initiate(TransferId(1), 2, "chat", vec![], vec![0; 2500], params(80), 0).unwrap();
        assert_eq!((wr.data_size, wr.block_count, wr.block_size, wr.window_size), (2500, 3, 1200, 80));
        assert_eq!(wr.info, "chat");
    }

    #[test]
    fn size_cap_boundary() {
        let p = TransferParameters {
            max_transfer_size: 100,
            ..params(80)
        };
        assert!(SenderState::initiate(TransferId(1), 0, "", vec![], vec![0; 100], p, 0).is_ok());
        let err = SenderState::initiate(TransferId(1), 0, "", vec![], vec![0; 101], p, 0).unwrap_err();
        assert_eq!(err.code(), Some(crate::wire::ErrorCode::SizeExceeded));
    }

    #[test]
    fn write_ack_starts_first_window() {
        let mut s = sender(2500, 80);
        let out = s.handle_ack(&ack(0, vec![]), 10);
        assert_eq!(blocks(&out), [0, 1, 2]);
        assert_eq!(out[2].payload.len(), 100);
        assert_eq!(s.phase(), SenderPhase::Sending);
    }

    #[test]
    fn piggybacks_losses_into_next_window() {
        let mut s = sender(200 * 1200, 80);
        s.handle_ack(&ack(0, vec![]), 0);
        let out = s.handle_ack(&ack(1, vec![17]), 5);
        let mut expected = vec![17];
        expected.extend(80..160);
        assert_eq!(blocks(&out), expected);
        assert_eq!(s.window_index(), 1);
        assert_eq!(s.counters().lost_blocks, 1);
    }

    #[test]
    fn final_ack_completes() {
        let mut s = sender(2500, 80);
        s.handle_ack(&ack(0, vec![]), 0);
        assert!(s.handle_ack(&ack(1, vec![]), 5).is_empty());
        assert_eq!(s.phase(), SenderPhase::Done);
        assert_eq!(s.deadline(), None);
    }

    #[test]
    fn drain_resends_only_listed_blocks() {
        let mut s = sender(2500, 80);
        s.handle_ack(&ack(0, vec![]), 0);
        let out = s.handle_ack(&ack(1, vec![0, 2]), 5);
        assert_eq!(blocks(&out), [0, 2]);
        assert_eq!(s.phase(), SenderPhase::LastWindowDrain);
        let out = s.handle_ack(&ack(1, vec![2]), 9);
        assert_eq!(blocks(&out), [2]);
        s.handle_ack(&ack(1, vec![]), 12);
        assert_eq!(s.phase(), SenderPhase::Done);
    }

    #[test]
    fn stale_ack_ignored_but_resets_attempts() {
        let mut s = sender(200 * 1200, 80);
        s.handle_ack(&ack(0, vec![]), 0);
        s.handle_ack(&ack(1, vec![]), 0);
        assert!(matches!(s.on_tick(100), SenderTick::Retransmit(_)));
        assert_eq!(s.attempts_left(), 2);
        assert!(s.handle_ack(&ack(1, vec![3]), 150).is_empty());
        assert_eq!(s.attempts_left(), 3);
        assert_eq!(s.counters().stale_acks, 1);
        assert_eq!(s.window_index(), 1);
    }

    #[test]
    fn out_of_range_unreceived_ignored() {
        let mut s = sender(200 * 1200, 80);
        s.handle_ack(&ack(0, vec![]), 0);
        assert!(s.handle_ack(&ack(1, vec![80]), 0).is_empty());
        assert_eq!(s.window_index(), 0);
    }

    #[test]
    fn tick_boundary_and_timeout() {
        let mut s = sender(2500, 80);
        assert_eq!(s.on_tick(99), SenderTick::Idle);
        match s.on_tick(100) {
            SenderTick::Retransmit(p) => assert!(matches!(p[0], Packet::WriteRequest(_))),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.on_tick(199), SenderTick::Idle);
        assert!(matches!(s.on_tick(200), SenderTick::Retransmit(_)));
        assert_eq!(s.on_tick(300), SenderTick::TimedOut);
        assert_eq!(s.phase(), SenderPhase::Failed);
        assert_eq!(s.counters().write_request_retransmits, 2);
        assert_eq!(s.retry_parameters().window_size, 40);
    }

    #[test]
    fn window_retransmit_resends_pending() {
        let mut s = sender(200 * 1200, 80);
        s.record_batches();
        s.handle_ack(&ack(0, vec![]), 0);
        s.handle_ack(&ack(1, vec![4, 9]), 10);
        let SenderTick::Retransmit(p) = s.on_tick(110) else { panic!() };
        assert_eq!(p.len(), 82);
        assert_eq!(s.counters().retransmitted_windows, 1);
        let kinds: Vec<_> = s.batches().unwrap().iter().map(|b| (b.window_index, b.kind)).collect();
        assert_eq!(
            kinds,
            [(0, BatchKind::Window), (1, BatchKind::Window), (1, BatchKind::Retransmit)]
        );
    }

    #[test]
    fn zero_size_completes_on_write_ack() {
        let mut s = sender(0, 80);
        assert_eq!(s.block_count(), 0);
        assert!(s.handle_ack(&ack(0, vec![]), 1).is_empty());
        assert_eq!(s.phase(), SenderPhase::Done);
    }
}
