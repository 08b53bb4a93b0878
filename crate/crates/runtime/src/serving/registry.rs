use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};

use flowserve_core::row::{HttpResponseData, RoutingId};
use parking_lot::Mutex;
use serde::Serialize;
use tokio::sync::oneshot;

pub const DEFAULT_SHARDS: usize = 32;

struct Entry {
    responder: oneshot::Sender<HttpResponseData>,
    #[allow(dead_code)]
    arrival_ms: u64,
}

#[derive(Default)]
struct Shard {
    open: HashMap<u64, Entry>,
    // (deadline, seq), kept non-decreasing in deadline so the sweep can stop
    // at the first live one. Completed entries stay until their deadline
    // and are skipped.
    deadlines: VecDeque<(u64, u64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct RegistryCounters {
    pub inserted: u64,
    pub completed: u64,
    pub expired: u64,
    pub shutdown: u64,
    pub dropped: u64,
    pub open: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Delivered,
    /// Already completed, expired, or never issued here.
    Unknown,
    /// The id belongs to another worker.
    Foreign,
}

/// Open HTTP exchanges of one worker, keyed by routing id. Entries are
/// striped over shards by sequence number so concurrent inserts and
/// completions rarely contend; every operation touches one shard.
pub struct Registry {
    worker_id: u32,
    timeout_ms: AtomicU64,
    next_seq: AtomicU64,
    shards: Box<[Mutex<Shard>]>,
    inserted: AtomicU64,
    completed: AtomicU64,
    expired: AtomicU64,
    shutdown: AtomicU64,
    dropped: AtomicU64,
}

impl Registry {
    pub fn new(worker_id: u32, timeout_ms: u64) -> Self {
        Self::with_shards(worker_id, timeout_ms, DEFAULT_SHARDS)
    }

    pub fn with_shards(worker_id: u32, timeout_ms: u64, shards: usize) -> Self {
        Self {
            worker_id,
            timeout_ms: AtomicU64::new(timeout_ms),
            next_seq: AtomicU64::new(0),
            shards: (0..shards.max(1)).map(|_| Mutex::new(Shard::default())).collect(),
            inserted: AtomicU64::new(0),
            completed: AtomicU64::new(0),
            expired: AtomicU64::new(0),
            shutdown: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        }
    }

    pub fn worker_id(&self) -> u32 {
        self.worker_id
    }

    pub fn timeout_ms(&self) -> u64 {
        self.timeout_ms.load(Ordering::Relaxed)
    }

    /// Applies to entries inserted from now on.
    pub fn set_timeout_ms(&self, timeout_ms: u64) {
        self.timeout_ms.store(timeout_ms, Ordering::Relaxed);
    }

    fn shard(&self, seq: u64) -> &Mutex<Shard> {
        &self.shards[(seq % self.shards.len() as u64) as usize]
    }

    /// Issues a fresh routing id and registers its responder.
    pub fn insert(&self, now_ms: u64) -> (RoutingId, oneshot::Receiver<HttpResponseData>) {
        let (tx, rx) = oneshot::channel();
        let seq = self.next_seq.fetch_add(1, Ordering::Relaxed);
        {
            let mut shard = self.shard(seq).lock();
            shard.open.insert(
                seq,
                Entry {
                    responder: tx,
                    arrival_ms: now_ms,
                },
            );
            // A clock step backwards must not break the ordering.
            let floor = shard.deadlines.back().map_or(0, |&(d, _)| d);
            shard.deadlines.push_back(((now_ms + self.timeout_ms()).max(floor), seq));
        }
        self.inserted.fetch_add(1, Ordering::Relaxed);
        (RoutingId::new(self.worker_id, seq), rx)
    }

    /// Completes the exchange for `id` exactly once. Late or duplicate
    /// replies are counted as dropped.
    pub fn complete(&self, id: RoutingId, response: HttpResponseData) -> Completion {
        if id.worker_id != self.worker_id {
            return Completion::Foreign;
        }
        let entry = self.shard(id.seq).lock().open.remove(&id.seq);
        match entry {
            Some(entry) => {
                // A client that hung up leaves a closed receiver; the
                // exchange is still complete from the registry's view.
                let _ = entry.responder.send(response);
                self.completed.fetch_add(1, Ordering::Relaxed);
                Completion::Delivered
            }
            None => {
                self.dropped.fetch_add(1, Ordering::Relaxed);
                tracing::debug!(%id, "dropping reply for unknown or expired id");
                Completion::Unknown
            }
        }
    }

    /// Answers every entry whose deadline is at or before `now_ms` with 504
    /// and returns the expired ids. Work is proportional to the number of
    /// deadlines passed.
    pub fn expire(&self, now_ms: u64) -> Vec<RoutingId> {
        let mut expired = Vec::new();
        for shard in self.shards.iter() {
            let mut shard = shard.lock();
            while let Some(&(deadline, seq)) = shard.deadlines.front() {
                if deadline > now_ms {
                    break;
                }
                shard.deadlines.pop_front();
                if let Some(entry) = shard.open.remove(&seq) {
                    let _ = entry.responder.send(HttpResponseData::new(504, b"request timed out".to_vec()));
                    expired.push(RoutingId::new(self.worker_id, seq));
                }
            }
        }
        self.expired.fetch_add(expired.len() as u64, Ordering::Relaxed);
        expired.sort();
        expired
    }

    /// Completes every open entry with `status`; used when draining ends.
    pub fn shutdown(&self, status: u16) -> usize {
        let mut n = 0;
        for shard in self.shards.iter() {
            let mut shard = shard.lock();
            shard.deadlines.clear();
            for (_, entry) in shard.open.drain() {
                let _ = entry
                    .responder
                    .send(HttpResponseData::new(status, b"worker shutting down".to_vec()));
                n += 1;
            }
        }
        self.shutdown.fetch_add(n as u64, Ordering::Relaxed);
        n
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(|s| s.lock().open.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counters(&self) -> RegistryCounters {
        RegistryCounters {
            inserted: self.inserted.load(Ordering::Relaxed),
            completed: self.completed.load(Ordering::Relaxed),
            expired: self.expired.load(Ordering::Relaxed),
            shutdown: self.shutdown.load(Ordering::Relaxed),
            dropped: self.dropped.load(Ordering::Relaxed),
            open: self.len() as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_distinct_and_local() {
        let r = Registry::new(3, 1000);
        let (a, _ra) = r.insert(0);
        let (b, _rb) = r.insert(0);
        assert_ne!(a, b);
        assert_eq!((a.worker_id, b.worker_id), (3, 3));
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn complete_delivers_once() {
        let r = Registry::new(0, 1000);
        let (id, mut rx) = r.insert(0);
        assert_eq!(r.complete(id, HttpResponseData::empty(200)), Completion::Delivered);
        assert_eq!(rx.try_recv().unwrap().status, 200);
        assert_eq!(r.complete(id, HttpResponseData::empty(200)), Completion::Unknown);
        assert_eq!(
            r.complete(RoutingId::new(1, 0), HttpResponseData::empty(200)),
            Completion::Foreign
        );
        let c = r.counters();
        assert_eq!((c.completed, c.dropped, c.open), (1, 1, 0));
    }

    #[test]
    fn empty_registry_expires_nothing() {
        assert!(Registry::new(0, 10).expire(u64::MAX).is_empty());
    }

    #[test]
    fn expiry_answers_504_and_late_reply_is_dropped() {
        let r = Registry::new(0, 100);
        let (id, mut rx) = r.insert(1000);
        assert!(r.expire(1099).is_empty());
        assert_eq!(r.expire(1100), vec![id]);
        assert_eq!(rx.try_recv().unwrap().status, 504);
        assert_eq!(r.complete(id, HttpResponseData::empty(200)), Completion::Unknown);
        let c = r.counters();
        assert_eq!((c.expired, c.dropped, c.completed), (1, 1, 0));
    }

    #[test]
    fn sweep_returns_exactly_the_expired_half() {
        let r = Registry::new(0, 1000);
        let mut receivers = Vec::new();
        let mut ids = Vec::new();
        for i in 0..1000u64 {
            let (id, rx) = r.insert(i);
            ids.push(id);
            receivers.push(rx);
        }
        // Deadline of entry i is i + 1000.
        let expired = r.expire(1499);
        assert_eq!(expired, ids[..500].to_vec());
        assert_eq!(r.len(), 500);
        assert!(receivers[..500].iter_mut().all(|rx| rx.try_recv().unwrap().status == 504));
        assert!(receivers[500..].iter_mut().all(|rx| rx.try_recv().is_err()));
    }

    #[test]
    fn clock_stepping_back_keeps_sweep_ordered() {
        let r = Registry::with_shards(0, 100, 1);
        let (a, _ra) = r.insert(1000);
        let (b, _rb) = r.insert(900);
        assert!(r.expire(1099).is_empty());
        assert_eq!(r.expire(1100), vec![a, b]);
    }

    #[test]
    fn shutdown_answers_everyone() {
        let r = Registry::new(0, 1000);
        let mut rxs: Vec<_> = (0..5).map(|_| r.insert(0).1).collect();
        assert_eq!(r.shutdown(503), 5);
        assert!(rxs.iter_mut().all(|rx| rx.try_recv().unwrap().status == 503));
        assert!(r.is_empty());
    }
}
