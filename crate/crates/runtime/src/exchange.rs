//! Hash shuffle between workers. Partition `p` of `n` is owned by the
//! worker at position `p mod W` in the id-sorted worker list.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use flowserve_core::row::{hash_partition, key_bytes, CodecError, Row, Schema};
use parking_lot::Mutex;
use thiserror::Error;
use tokio::sync::Notify;
use tokio::time::Instant;

use crate::frame::{Frame, ShuffleFrame};
use crate::transport::{Peers, TransportError};

pub fn partition_of(row: &Row, key_cols: &[usize], partitions: usize) -> usize {
    hash_partition(&key_bytes(key_cols.iter().map(|&c| row.get(c))), partitions)
}

/// Splits rows into `partitions` groups by key hash, preserving order
/// within each group.
pub fn partition_rows(rows: Vec<Row>, key_cols: &[usize], partitions: usize) -> Vec<Vec<Row>> {
    let mut parts = vec![Vec::new(); partitions.max(1)];
    for row in rows {
        let p = partition_of(&row, key_cols, partitions);
        parts[p].push(row);
    }
    parts
}

/// Worker id owning `partition` given the sorted participant list.
pub fn owner(partition: usize, workers: &[u32]) -> u32 {
    workers[partition % workers.len()]
}

#[derive(Debug, Error)]
pub enum ShuffleError {
    #[error("shuffle send failed: {0}")]
    Transport(#[from] TransportError),
    #[error("shuffle {exchange} timed out waiting for workers {missing:?}")]
    Incomplete { exchange: u64, missing: Vec<u32> },
    #[error("undecodable shuffle rows from worker {source_worker}: {error}")]
    Codec { source_worker: u32, error: CodecError },
}

impl ShuffleError {
    /// Workers to blame for the failure.
    pub fn peers(&self) -> Vec<u32> {
        match self {
            ShuffleError::Transport(e) => vec![e.worker()],
            ShuffleError::Incomplete { missing, .. } => missing.clone(),
            ShuffleError::Codec { source_worker, .. } => vec![*source_worker],
        }
    }
}

type ExchangeKey = (String, u64);

/// Frames received for barrier exchanges, keyed by pipeline and exchange
/// id. Frames may arrive before the local side starts the exchange.
#[derive(Default)]
pub struct ExchangeInbox {
    pending: Mutex<HashMap<ExchangeKey, BTreeMap<(u32, u32), ShuffleFrame>>>,
    arrived: Notify,
}

impl ExchangeInbox {
    pub fn deliver(&self, frame: ShuffleFrame) {
        let key = (frame.pipeline_id.clone(), frame.exchange_id);
        self.pending
            .lock()
            .entry(key)
            .or_default()
            .insert((frame.target_partition, frame.source_worker), frame);
        self.arrived.notify_waiters();
    }

    fn missing_sources(&self, key: &ExchangeKey, owned: &[u32], workers: &[u32]) -> Vec<u32> {
        let pending = self.pending.lock();
        let got = pending.get(key);
        workers
            .iter()
            .copied()
            .filter(|&w| {
                owned
                    .iter()
                    .any(|&p| got.map_or(true, |frames| !frames.contains_key(&(p, w))))
            })
            .collect()
    }

    fn take(&self, key: &ExchangeKey) -> BTreeMap<(u32, u32), ShuffleFrame> {
        self.pending.lock().remove(key).unwrap_or_default()
    }
}

/// One worker's endpoint for barrier exchanges.
pub struct ShuffleExchange {
    me: u32,
    workers: Vec<u32>,
    peers: Arc<Peers>,
    inbox: Arc<ExchangeInbox>,
}

impl ShuffleExchange {
    pub fn new(me: u32, mut workers: Vec<u32>, peers: Arc<Peers>, inbox: Arc<ExchangeInbox>) -> Self {
        workers.sort_unstable();
        workers.dedup();
        assert!(workers.contains(&me), "worker {me} is not a participant");
        Self {
            me,
            workers,
            peers,
            inbox,
        }
    }

    pub fn workers(&self) -> &[u32] {
        &self.workers
    }

    /// Sends every local row to the owner of its key's partition and waits
    /// for the frames of every participant for the partitions owned here.
    /// A frame is sent for every partition, empty or not, so that
    /// completion is known without a separate end marker. Returned rows are
    /// ordered by partition, then source worker, then source order.
    #[allow(clippy::too_many_arguments)]
    pub async fn exchange(
        &self,
        pipeline_id: &str,
        exchange_id: u64,
        stage_index: u32,
        schema: &Schema,
        rows: Vec<Row>,
        key_cols: &[usize],
        partitions: Option<usize>,
        deadline: Instant,
    ) -> Result<Vec<Row>, ShuffleError> {
        assert_ne!(exchange_id, 0, "exchange id 0 is reserved for streaming shuffles");
        let n = partitions.unwrap_or(self.workers.len()).max(1);
        let parts = partition_rows(rows, key_cols, n);
        let mut sends = Vec::new();
        for (p, part) in parts.into_iter().enumerate() {
            let frame = ShuffleFrame {
                pipeline_id: pipeline_id.to_string(),
                exchange_id,
                stage_index,
                target_partition: p as u32,
                partition_count: n as u32,
                source_worker: self.me,
                row_count: part.len() as u32,
                rows: ShuffleFrame::encode_rows(&part),
            };
            let target = owner(p, &self.workers);
            if target == self.me {
                self.inbox.deliver(frame);
            } else {
                sends.push((target, Frame::Shuffle(frame)));
            }
        }
        // Distinct peers use distinct connections, so sending in turn only
        // serializes writes into kernel buffers.
        for (target, frame) in &sends {
            self.peers.send(*target, frame, deadline).await?;
        }

        let owned: Vec<u32> = (0..n as u32)
            .filter(|&p| owner(p as usize, &self.workers) == self.me)
            .collect();
        let key = (pipeline_id.to_string(), exchange_id);
        loop {
            let notified = self.inbox.arrived.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let missing = self.inbox.missing_sources(&key, &owned, &self.workers);
            if missing.is_empty() {
                break;
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                let missing = self.inbox.missing_sources(&key, &owned, &self.workers);
                if missing.is_empty() {
                    break;
                }
                return Err(ShuffleError::Incomplete {
                    exchange: exchange_id,
                    missing,
                });
            }
        }
        let mut out = Vec::new();
        for ((_, source), frame) in self.inbox.take(&key) {
            let rows = frame.decode_rows(schema).map_err(|error| ShuffleError::Codec {
                source_worker: source,
                error,
            })?;
            out.extend(rows);
        }
        Ok(out)
    }
}
