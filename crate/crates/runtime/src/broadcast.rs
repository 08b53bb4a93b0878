//! Driver-to-all table replication. Each worker verifies a SHA-256 digest
//! over the schema document and the encoded rows before acknowledging.

use std::sync::atomic::{AtomicU64, Ordering};

use flowserve_core::pipeline::BroadcastTable;
use flowserve_core::row::Schema;
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use tokio::task::JoinSet;
use tokio::time::Instant;

use crate::frame::{decode_rows, Digest, Frame, ShuffleFrame};
use crate::transport::request;

static CORRELATION: AtomicU64 = AtomicU64::new(1);

pub fn next_correlation() -> u64 {
    CORRELATION.fetch_add(1, Ordering::Relaxed)
}

pub fn table_digest(schema_json: &str, rows: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update((schema_json.len() as u64).to_le_bytes());
    h.update(schema_json.as_bytes());
    h.update(rows);
    h.finalize().into()
}

pub fn hex(digest: &Digest) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn broadcast_frame(table: &BroadcastTable) -> Frame {
    let schema_json = serde_json::to_string(&table.schema).expect("schemas serialize");
    let rows = ShuffleFrame::encode_rows(&table.rows);
    Frame::Broadcast {
        correlation: next_correlation(),
        digest: table_digest(&schema_json, &rows),
        table_id: table.table_id.clone(),
        schema_json,
        row_count: table.rows.len() as u32,
        rows,
    }
}

/// Rebuilds a table from a broadcast frame, checking the digest first.
/// Returns the table and the digest computed locally.
pub fn receive_table(
    table_id: &str,
    schema_json: &str,
    digest: &Digest,
    row_count: u32,
    rows: &[u8],
) -> Result<(BroadcastTable, Digest), String> {
    let local = table_digest(schema_json, rows);
    if &local != digest {
        return Err(format!(
            "digest mismatch for table {table_id}: sent {}, computed {}",
            hex(digest),
            hex(&local)
        ));
    }
    let schema: Schema = serde_json::from_str(schema_json).map_err(|e| format!("schema: {e}"))?;
    let rows = decode_rows(rows, row_count, &schema).map_err(|e| format!("rows: {e}"))?;
    let table = BroadcastTable::new(table_id, schema, rows).map_err(|e| e.to_string())?;
    Ok((table, local))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastAck {
    pub worker_id: u32,
    pub digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("broadcast of table {table} failed on worker {worker}: {message}")]
pub struct BroadcastError {
    pub table: String,
    pub worker: u32,
    pub message: String,
}

/// Sends `table` to every worker concurrently and waits for all
/// acknowledgements. Acks come back sorted by worker id.
pub async fn distribute_broadcast(
    table: &BroadcastTable,
    workers: &[(u32, String)],
    deadline: Instant,
) -> Result<Vec<BroadcastAck>, BroadcastError> {
    let frame = std::sync::Arc::new(broadcast_frame(table));
    let Frame::Broadcast { digest: sent, .. } = *frame else {
        unreachable!()
    };
    let mut set = JoinSet::new();
    for (worker, addr) in workers.iter().cloned() {
        let frame = frame.clone();
        set.spawn(async move { (worker, request(worker, &addr, &frame, deadline).await) });
    }
    let fail = |worker: u32, message: String| BroadcastError {
        table: table.table_id.clone(),
        worker,
        message,
    };
    let mut acks = Vec::new();
    while let Some(joined) = set.join_next().await {
        let (worker, reply) = joined.map_err(|e| fail(u32::MAX, e.to_string()))?;
        match reply {
            Ok(Frame::Ack {
                ok: true, digest, ..
            }) if digest == sent => acks.push(BroadcastAck {
                worker_id: worker,
                digest,
            }),
            Ok(Frame::Ack { ok: true, digest, .. }) => {
                return Err(fail(worker, format!("acknowledged digest {}", hex(&digest))))
            }
            Ok(Frame::Ack { message, .. }) => return Err(fail(worker, message)),
            Ok(other) => return Err(fail(worker, format!("unexpected reply kind {}", other.kind()))),
            Err(e) => return Err(fail(worker, e.to_string())),
        }
    }
    acks.sort_by_key(|a| a.worker_id);
    Ok(acks)
}
