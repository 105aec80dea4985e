use std::collections::{BTreeSet, VecDeque};

use crate::wire::{ErrorCode, TransferId};

use super::{Callback, Engine, PeerId, TransferParameters};

/// A transfer waiting for its peer to become available.
#[derive(Clone, Debug)]
pub struct ScheduledTransfer<P> {
    pub id: TransferId,
    pub peer: P,
    pub info: String,
    pub metadata: Vec<u8>,
    pub data: Vec<u8>,
    pub params: Option<TransferParameters>,
}

/// FIFO of deferred transfers. A queued transfer starts once its peer is
/// connected, has no other transfer in progress, and the blob fits the size
/// cap; oversize entries are dropped with a `SIZE_EXCEEDED` error callback.
#[derive(Debug)]
pub struct Scheduler<P> {
    queue: VecDeque<ScheduledTransfer<P>>,
}

impl<P> Default for Scheduler<P> {
    fn default() -> Self {
        Self { queue: VecDeque::new() }
    }
}

impl<P: PeerId> Scheduler<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn queued(&self) -> impl Iterator<Item = &ScheduledTransfer<P>> {
        self.queue.iter()
    }

    /// Queues a transfer; its identifier is reserved now so callbacks can
    /// refer to it before it starts.
    pub fn schedule(
        &mut self,
        engine: &mut Engine<P>,
        peer: P,
        info: &str,
        metadata: Vec<u8>,
        data: Vec<u8>,
        params: Option<TransferParameters>,
    ) -> TransferId {
        let id = engine.reserve_id();
        self.queue.push_back(ScheduledTransfer {
            id,
            peer,
            info: info.to_owned(),
            metadata,
            data,
            params,
        });
        id
    }

    /// Starts every queued transfer whose conditions hold, oldest first per peer.
    pub fn poll(
        &mut self,
        engine: &mut Engine<P>,
        is_connected: impl Fn(&P) -> bool,
        now: u64,
    ) -> Vec<TransferId> {
        let mut started = Vec::new();
        let mut blocked: BTreeSet<P> = BTreeSet::new();
        let mut kept = VecDeque::with_capacity(self.queue.len());
        for item in self.queue.drain(..) {
            let params = item.params.unwrap_or(engine.config().params);
            if item.data.len() as u64 > params.max_transfer_size {
                engine.push_callback(Callback::Errored {
                    id: item.id,
                    peer: item.peer,
                    code: ErrorCode::SizeExceeded,
                    retry: None,
                    counters: None,
                });
                continue;
            }
            if blocked.contains(&item.peer) || !is_connected(&item.peer) || engine.is_busy(&item.peer) {
                blocked.insert(item.peer.clone());
                kept.push_back(item);
                continue;
            }
            let ScheduledTransfer {
                id,
                peer,
                info,
                metadata,
                data,
                params,
            } = item;
            match engine.start_transfer_with_id(id, peer.clone(), &info, metadata, data, params, now) {
                Ok(id) => started.push(id),
                Err(err) => engine.push_callback(Callback::Errored {
                    id,
                    peer: peer.clone(),
                    code: err.code().unwrap_or(ErrorCode::SizeExceeded),
                    retry: None,
                    counters: None,
                }),
            }
            blocked.insert(peer);
        }
        self.queue = kept;
        started
    }
}
