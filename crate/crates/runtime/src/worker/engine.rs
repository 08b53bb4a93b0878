use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use flowserve_core::pipeline::{CompiledPipeline, StageSpec};
use flowserve_core::row::{HttpResponseData, RoutingId, Row};
use tokio::sync::mpsc;
use tokio::time::Instant;

use super::WorkerShared;
use crate::exchange::{owner, partition_of};
use crate::frame::{Frame, ShuffleFrame};
use crate::serving::{settle, Batcher, Metrics, ServingConfig, ServingMode, ServingPlan};
use crate::transport::Peers;

/// How long a forwarded frame may spend reconnecting before it counts as
/// failed.
const FORWARD_DEADLINE: Duration = Duration::from_secs(2);

/// A pipeline deployed on this worker, shared by the scheduler, the
/// internal frame service and every in-flight batch.
pub struct Exec {
    pub pipeline: CompiledPipeline,
    pub plan: ServingPlan,
    pub config: ServingConfig,
    /// Participants sorted by id.
    pub workers: Vec<u32>,
    pub peers: Arc<Peers>,
    /// Position of the routing id column before each stage, and after the
    /// last one.
    id_positions: Vec<usize>,
    blocking: bool,
}

impl Exec {
    pub fn new(
        pipeline: CompiledPipeline,
        plan: ServingPlan,
        config: ServingConfig,
        mut workers: Vec<u32>,
        peers: Arc<Peers>,
    ) -> Self {
        workers.sort_unstable();
        let id_positions = (0..=pipeline.stage_count())
            .map(|i| {
                pipeline
                    .schema_before(i)
                    .index_of(&plan.id_col)
                    .expect("plan checks the id column at every stage")
            })
            .collect();
        // Stages that wait on the network or burn CPU for long move off the
        // async threads; everything else is cheap enough to run inline.
        let blocking = pipeline
            .spec()
            .stages
            .iter()
            .any(|s| matches!(s, StageSpec::HttpCall { .. } | StageSpec::LimeExplain { .. }));
        Self {
            pipeline,
            plan,
            config,
            workers,
            peers,
            id_positions,
            blocking,
        }
    }

    fn next_boundary(&self, search_from: usize) -> usize {
        let n = self.pipeline.stage_count();
        if self.workers.len() < 2 {
            return n;
        }
        self.plan
            .wide_stages
            .iter()
            .copied()
            .find(|&w| w >= search_from)
            .unwrap_or(n)
    }

    async fn run(self: &Arc<Self>, from: usize, to: usize, rows: Vec<Row>) -> Result<Vec<Row>, String> {
        if self.blocking {
            let me = self.clone();
            tokio::task::spawn_blocking(move || me.pipeline.run_range(from, to, rows))
                .await
                .map_err(|e| format!("pipeline task failed: {e}"))?
                .map_err(|e| e.to_string())
        } else {
            self.pipeline.run_range(from, to, rows).map_err(|e| e.to_string())
        }
    }

    /// Runs `rows` from stage `from` up to the next shuffle boundary or the
    /// end. `resumed` means the rows were already routed for the wide stage
    /// at `from`, which then runs locally.
    pub async fn process(self: Arc<Self>, shared: Arc<WorkerShared>, rows: Vec<Row>, from: usize, resumed: bool) {
        let id_pos = self.id_positions[from];
        let ids: Vec<RoutingId> = rows.iter().filter_map(|r| r.get(id_pos).as_routing_id()).collect();
        let boundary = self.next_boundary(if resumed { from + 1 } else { from });
        let out = match self.run(from, boundary, rows).await {
            Ok(out) => out,
            Err(message) => {
                tracing::warn!(%message, "pipeline batch failed");
                Metrics::inc(&shared.metrics.pipeline_errors);
                let body = format!("pipeline error: {message}").into_bytes();
                let replies = ids.into_iter().map(|id| (id, HttpResponseData::new(500, body.clone())));
                self.deliver(&shared, replies.collect());
                return;
            }
        };
        if boundary == self.pipeline.stage_count() {
            let s = settle(&ids, &out, self.plan.output_id, self.plan.output_reply);
            Metrics::add(&shared.metrics.fanout_anomalies, s.fanout as u64);
            Metrics::add(&shared.metrics.filtered, s.filtered.len() as u64);
            let mut replies = s.replies;
            replies.extend(
                s.filtered
                    .into_iter()
                    .map(|id| (id, HttpResponseData::empty(self.config.filtered_status))),
            );
            self.deliver(&shared, replies);
            return;
        }
        self.forward(shared, ids, out, boundary).await;
    }

    /// Routes rows about to enter wide stage `stage` to the owners of their
    /// partitions. Ids that did not survive to the boundary are answered
    /// with the filtered status here.
    async fn forward(self: Arc<Self>, shared: Arc<WorkerShared>, ids: Vec<RoutingId>, rows: Vec<Row>, stage: usize) {
        let id_pos = self.id_positions[stage];
        let surviving: HashSet<RoutingId> = rows.iter().filter_map(|r| r.get(id_pos).as_routing_id()).collect();
        let filtered: Vec<(RoutingId, HttpResponseData)> = ids
            .into_iter()
            .filter(|id| !surviving.contains(id))
            .map(|id| (id, HttpResponseData::empty(self.config.filtered_status)))
            .collect();
        Metrics::add(&shared.metrics.filtered, filtered.len() as u64);
        self.deliver(&shared, filtered);

        let (key_cols, n) = self.pipeline.shuffle_key(stage).expect("boundaries are wide stages");
        let n = n.unwrap_or(self.workers.len()).max(1);
        let mut parts: BTreeMap<usize, Vec<Row>> = BTreeMap::new();
        for row in rows {
            parts.entry(partition_of(&row, &key_cols, n)).or_default().push(row);
        }
        let mut local = Vec::new();
        let deadline = Instant::now() + FORWARD_DEADLINE;
        for (p, part) in parts {
            let target = owner(p, &self.workers);
            if target == shared.id {
                local.extend(part);
                continue;
            }
            let frame = Frame::Shuffle(ShuffleFrame {
                pipeline_id: self.pipeline.spec().id.clone(),
                exchange_id: 0,
                stage_index: stage as u32,
                target_partition: p as u32,
                partition_count: n as u32,
                source_worker: shared.id,
                row_count: part.len() as u32,
                rows: ShuffleFrame::encode_rows(&part),
            });
            match self.peers.send(target, &frame, deadline).await {
                Ok(()) => Metrics::inc(&shared.metrics.shuffle_frames_sent),
                Err(e) => {
                    tracing::warn!(error = %e, "shuffle send failed; aborting its rows");
                    Metrics::inc(&shared.metrics.shuffle_failures);
                    Metrics::add(&shared.metrics.aborted, part.len() as u64);
                    let body = format!("shuffle failed: {e}").into_bytes();
                    let replies = part
                        .iter()
                        .filter_map(|r| r.get(id_pos).as_routing_id())
                        .map(|id| (id, HttpResponseData::new(503, body.clone())))
                        .collect();
                    self.deliver(&shared, replies);
                }
            }
        }
        if !local.is_empty() {
            Box::pin(self.process(shared, local, stage, true)).await;
        }
    }

    /// Completes local exchanges in place and forwards the rest as response
    /// frames, one sender task per owning worker.
    fn deliver(self: &Arc<Self>, shared: &Arc<WorkerShared>, replies: Vec<(RoutingId, HttpResponseData)>) {
        let mut remote: BTreeMap<u32, Vec<(RoutingId, HttpResponseData)>> = BTreeMap::new();
        for (id, response) in replies {
            if id.worker_id == shared.id {
                shared.registry.complete(id, response);
            } else if shared.fault_drop() {
                Metrics::inc(&shared.metrics.fault_dropped_frames);
            } else {
                remote.entry(id.worker_id).or_default().push((id, response));
            }
        }
        for (worker, replies) in remote {
            let me = self.clone();
            let shared = shared.clone();
            tokio::spawn(async move {
                let deadline = Instant::now() + FORWARD_DEADLINE;
                for (id, response) in replies {
                    let frame = Frame::Response { id, response };
                    match me.peers.send(worker, &frame, deadline).await {
                        Ok(()) => Metrics::inc(&shared.metrics.response_frames_sent),
                        Err(e) => {
                            tracing::warn!(error = %e, %id, "reply forwarding failed");
                            Metrics::inc(&shared.metrics.response_frames_failed);
                        }
                    }
                }
            });
        }
    }
}

/// Pulls rows from ingress, forms batches per the serving mode and starts
/// each batch as its own task. Ends when the deployment is replaced.
pub async fn schedule(exec: Arc<Exec>, shared: Arc<WorkerShared>, mut rx: mpsc::UnboundedReceiver<Row>) {
    let dispatch = |batch: Vec<Row>| {
        Metrics::inc(&shared.metrics.batches);
        tokio::spawn(exec.clone().process(shared.clone(), batch, 0, false));
    };
    let max = exec.config.max_batch_size;
    match exec.config.mode {
        ServingMode::Continuous => {
            while let Some(first) = rx.recv().await {
                shared.dequeued(1);
                // Best-effort coalescing of rows that are already waiting.
                let mut batch = vec![first];
                while batch.len() < max {
                    match rx.try_recv() {
                        Ok(row) => batch.push(row),
                        Err(_) => break,
                    }
                }
                shared.dequeued(batch.len() - 1);
                dispatch(batch);
            }
        }
        ServingMode::Minibatch => {
            let origin = Instant::now();
            let now_ms = || origin.elapsed().as_millis() as u64;
            let mut batcher = Batcher::new(ServingMode::Minibatch, max, exec.config.max_batch_delay_ms);
            loop {
                let wake = batcher.deadline().map(|d| origin + Duration::from_millis(d));
                tokio::select! {
                    row = rx.recv() => match row {
                        Some(row) => {
                            shared.dequeued(1);
                            if let Some(batch) = batcher.push(row, now_ms()) {
                                dispatch(batch);
                            }
                        }
                        None => break,
                    },
                    _ = async { tokio::time::sleep_until(wake.unwrap()).await }, if wake.is_some() => {
                        if let Some(batch) = batcher.poll(now_ms()) {
                            dispatch(batch);
                        }
                    }
                }
            }
            if let Some(batch) = batcher.take() {
                dispatch(batch);
            }
        }
    }
}
