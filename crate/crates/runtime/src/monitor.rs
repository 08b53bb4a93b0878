use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;

pub const DEFAULT_HEARTBEAT_MS: u64 = 2000;
/// Consecutive missed intervals after which a worker is dead.
pub const MISSED_INTERVALS: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerState {
    Registering,
    Serving,
    Draining,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkerStatus {
    pub worker_id: u32,
    pub public_address: String,
    pub internal_address: String,
    pub state: WorkerState,
    pub queue_depth: u64,
    pub last_heartbeat_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Registration {
    pub public_address: String,
    pub internal_address: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct Heartbeat {
    pub queue_depth: u64,
    pub draining: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error("address {0:?} is not host:port")]
    BadAddress(String),
    #[error("address {address} already registered by worker {worker_id}")]
    Conflict { address: String, worker_id: u32 },
    #[error("unknown worker {0}")]
    UnknownWorker(u32),
    #[error("worker {0} was declared dead")]
    Dead(u32),
}

fn check_address(addr: &str) -> Result<(), MonitorError> {
    let bad = || MonitorError::BadAddress(addr.to_string());
    let (host, port) = addr.rsplit_once(':').ok_or_else(bad)?;
    if host.is_empty() || port.parse::<u16>().is_err() {
        return Err(bad());
    }
    Ok(())
}

struct Inner {
    workers: BTreeMap<u32, WorkerStatus>,
    next_id: u32,
}

/// Membership registry kept by the driver. Liveness is evaluated lazily
/// against the injected clock whenever state is read or written.
pub struct Monitor {
    clock: Arc<dyn Clock>,
    interval_ms: u64,
    inner: Mutex<Inner>,
}

impl Monitor {
    pub fn new(clock: Arc<dyn Clock>, interval_ms: u64) -> Self {
        Self {
            clock,
            interval_ms: interval_ms.max(1),
            inner: Mutex::new(Inner {
                workers: BTreeMap::new(),
                next_id: 0,
            }),
        }
    }

    pub fn interval_ms(&self) -> u64 {
        self.interval_ms
    }

    fn sweep(&self, inner: &mut Inner) {
        let now = self.clock.now_ms();
        let limit = MISSED_INTERVALS * self.interval_ms;
        for w in inner.workers.values_mut() {
            if w.state != WorkerState::Dead && now.saturating_sub(w.last_heartbeat_ms) >= limit {
                w.state = WorkerState::Dead;
            }
        }
    }

    /// Dead workers release their addresses; any live holder is a conflict.
    pub fn register(&self, reg: &Registration) -> Result<WorkerStatus, MonitorError> {
        check_address(&reg.public_address)?;
        check_address(&reg.internal_address)?;
        let mut inner = self.inner.lock();
        self.sweep(&mut inner);
        for w in inner.workers.values() {
            if w.state == WorkerState::Dead {
                continue;
            }
            for address in [&reg.internal_address, &reg.public_address] {
                if *address == w.internal_address || *address == w.public_address {
                    return Err(MonitorError::Conflict {
                        address: address.clone(),
                        worker_id: w.worker_id,
                    });
                }
            }
        }
        let status = WorkerStatus {
            worker_id: inner.next_id,
            public_address: reg.public_address.clone(),
            internal_address: reg.internal_address.clone(),
            state: WorkerState::Registering,
            queue_depth: 0,
            last_heartbeat_ms: self.clock.now_ms(),
        };
        inner.next_id += 1;
        inner.workers.insert(status.worker_id, status.clone());
        Ok(status)
    }

    pub fn heartbeat(&self, worker_id: u32, beat: &Heartbeat) -> Result<WorkerStatus, MonitorError> {
        let mut inner = self.inner.lock();
        self.sweep(&mut inner);
        let now = self.clock.now_ms();
        let w = inner
            .workers
            .get_mut(&worker_id)
            .ok_or(MonitorError::UnknownWorker(worker_id))?;
        match w.state {
            WorkerState::Dead => return Err(MonitorError::Dead(worker_id)),
            WorkerState::Registering | WorkerState::Serving if beat.draining => {
                w.state = WorkerState::Draining
            }
            WorkerState::Registering => w.state = WorkerState::Serving,
            _ => {}
        }
        w.queue_depth = beat.queue_depth;
        w.last_heartbeat_ms = now;
        Ok(w.clone())
    }

    /// All workers ever registered, dead ones included, by id.
    pub fn list_workers(&self) -> Vec<WorkerStatus> {
        let mut inner = self.inner.lock();
        self.sweep(&mut inner);
        inner.workers.values().cloned().collect()
    }

    pub fn serving_workers(&self) -> Vec<WorkerStatus> {
        self.list_workers()
            .into_iter()
            .filter(|w| w.state == WorkerState::Serving)
            .collect()
    }
}
