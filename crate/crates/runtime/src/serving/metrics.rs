use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::RegistryCounters;

/// Worker-level counters not owned by the registry.
#[derive(Debug, Default)]
pub struct Metrics {
    pub fanout_anomalies: AtomicU64,
    pub filtered: AtomicU64,
    pub aborted: AtomicU64,
    pub pipeline_errors: AtomicU64,
    pub rejected_draining: AtomicU64,
    pub response_frames_sent: AtomicU64,
    pub response_frames_received: AtomicU64,
    pub response_frames_failed: AtomicU64,
    pub fault_dropped_frames: AtomicU64,
    pub routing_errors: AtomicU64,
    pub shuffle_frames_sent: AtomicU64,
    pub shuffle_frames_received: AtomicU64,
    pub shuffle_failures: AtomicU64,
    pub batches: AtomicU64,
}

impl Metrics {
    pub fn inc(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self, registry: RegistryCounters) -> MetricsSnapshot {
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        MetricsSnapshot {
            accepted: registry.inserted,
            replied: registry.completed,
            timeouts: registry.expired,
            shutdown_completions: registry.shutdown,
            dropped_replies: registry.dropped,
            open: registry.open,
            fanout_anomalies: get(&self.fanout_anomalies),
            filtered: get(&self.filtered),
            aborted: get(&self.aborted),
            pipeline_errors: get(&self.pipeline_errors),
            rejected_draining: get(&self.rejected_draining),
            response_frames_sent: get(&self.response_frames_sent),
            response_frames_received: get(&self.response_frames_received),
            response_frames_failed: get(&self.response_frames_failed),
            fault_dropped_frames: get(&self.fault_dropped_frames),
            routing_errors: get(&self.routing_errors),
            shuffle_frames_sent: get(&self.shuffle_frames_sent),
            shuffle_frames_received: get(&self.shuffle_frames_received),
            shuffle_failures: get(&self.shuffle_failures),
            batches: get(&self.batches),
        }
    }
}

/// Body of `GET /v1/metrics`. `replied` counts every exchange completed
/// by the pipeline path, including filtered and aborted answers; timeouts
/// and shutdown completions are counted apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub accepted: u64,
    pub replied: u64,
    pub timeouts: u64,
    pub shutdown_completions: u64,
    pub dropped_replies: u64,
    pub open: u64,
    pub fanout_anomalies: u64,
    pub filtered: u64,
    pub aborted: u64,
    pub pipeline_errors: u64,
    pub rejected_draining: u64,
    pub response_frames_sent: u64,
    pub response_frames_received: u64,
    pub response_frames_failed: u64,
    pub fault_dropped_frames: u64,
    pub routing_errors: u64,
    pub shuffle_frames_sent: u64,
    pub shuffle_frames_received: u64,
    pub shuffle_failures: u64,
    pub batches: u64,
}

impl std::ops::Add for MetricsSnapshot {
    type Output = MetricsSnapshot;

    fn add(self, o: MetricsSnapshot) -> MetricsSnapshot {
        MetricsSnapshot {
            accepted: self.accepted + o.accepted,
            replied: self.replied + o.replied,
            timeouts: self.timeouts + o.timeouts,
            shutdown_completions: self.shutdown_completions + o.shutdown_completions,
            dropped_replies: self.dropped_replies + o.dropped_replies,
            open: self.open + o.open,
            fanout_anomalies: self.fanout_anomalies + o.fanout_anomalies,
            filtered: self.filtered + o.filtered,
            aborted: self.aborted + o.aborted,
            pipeline_errors: self.pipeline_errors + o.pipeline_errors,
            rejected_draining: self.rejected_draining + o.rejected_draining,
            response_frames_sent: self.response_frames_sent + o.response_frames_sent,
            response_frames_received: self.response_frames_received + o.response_frames_received,
            response_frames_failed: self.response_frames_failed + o.response_frames_failed,
            fault_dropped_frames: self.fault_dropped_frames + o.fault_dropped_frames,
            routing_errors: self.routing_errors + o.routing_errors,
            shuffle_frames_sent: self.shuffle_frames_sent + o.shuffle_frames_sent,
            shuffle_frames_received: self.shuffle_frames_received + o.shuffle_frames_received,
            shuffle_failures: self.shuffle_failures + o.shuffle_failures,
            batches: self.batches + o.batches,
        }
    }
}

impl std::iter::Sum for MetricsSnapshot {
    fn sum<I: Iterator<Item = MetricsSnapshot>>(iter: I) -> Self {
        iter.fold(MetricsSnapshot::default(), |a, b| a + b)
    }
}
