//! Worker process: public ingress, internal frame service, scheduler and
//! reply routing for the deployed pipeline.

mod engine;
mod ingress;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use flowserve_core::pipeline::{Catalog, CompiledPipeline, ExecMode};
use flowserve_core::row::Row;
use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, watch};

pub use engine::Exec;

use crate::broadcast::receive_table;
use crate::client::DriverClient;
use crate::clock::{Clock, SystemClock};
use crate::driver::DeployDocument;
use crate::exchange::ExchangeInbox;
use crate::frame::{Frame, FrameError};
use crate::monitor::{Heartbeat, Registration, DEFAULT_HEARTBEAT_MS};
use crate::serving::{plan_serving, Metrics, MetricsSnapshot, Registry};
use crate::transport::{serve_frames, FrameHandler, HandlerFuture, Peers};

pub const SERVER_HEADER: &str = concat!("flowserve/", env!("CARGO_PKG_VERSION"));
pub const DEFAULT_DRAIN_GRACE_MS: u64 = 10_000;
pub const DEFAULT_SWEEP_MS: u64 = 100;
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerConfig {
    /// Driver `host:port`; `None` runs standalone with `worker_id`.
    pub driver: Option<String>,
    pub worker_id: u32,
    pub public_bind: String,
    pub internal_bind: String,
    pub heartbeat_ms: u64,
    pub sweep_ms: u64,
    pub drain_grace_ms: u64,
    /// Probability of silently dropping each outgoing response frame.
    pub drop_response_frames: f64,
    pub fault_seed: u64,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            driver: None,
            worker_id: 0,
            public_bind: "127.0.0.1:0".into(),
            internal_bind: "127.0.0.1:0".into(),
            heartbeat_ms: DEFAULT_HEARTBEAT_MS,
            sweep_ms: DEFAULT_SWEEP_MS,
            drain_grace_ms: DEFAULT_DRAIN_GRACE_MS,
            drop_response_frames: 0.0,
            fault_seed: 0,
        }
    }
}

pub(crate) struct Deployment {
    exec: Arc<Exec>,
    tx: mpsc::UnboundedSender<Row>,
}

pub struct WorkerShared {
    pub id: u32,
    pub registry: Registry,
    pub metrics: Metrics,
    clock: Arc<dyn Clock>,
    draining: AtomicBool,
    queued: AtomicU64,
    deployment: RwLock<Option<Arc<Deployment>>>,
    tables: RwLock<Catalog>,
    inbox: Arc<ExchangeInbox>,
    fault: Option<Mutex<(f64, ChaCha8Rng)>>,
}

impl WorkerShared {
    fn new(id: u32, clock: Arc<dyn Clock>, config: &WorkerConfig) -> Self {
        let fault = (config.drop_response_frames > 0.0)
            .then(|| Mutex::new((config.drop_response_frames, ChaCha8Rng::seed_from_u64(config.fault_seed))));
        Self {
            id,
            registry: Registry::new(id, DEFAULT_TIMEOUT_MS),
            metrics: Metrics::default(),
            clock,
            draining: AtomicBool::new(false),
            queued: AtomicU64::new(0),
            deployment: RwLock::new(None),
            tables: RwLock::new(Catalog::new()),
            inbox: Arc::new(ExchangeInbox::default()),
            fault,
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        self.metrics.snapshot(self.registry.counters())
    }

    pub fn queue_depth(&self) -> u64 {
        self.queued.load(Ordering::Relaxed)
    }

    pub fn is_draining(&self) -> bool {
        self.draining.load(Ordering::SeqCst)
    }

    pub fn inbox(&self) -> &Arc<ExchangeInbox> {
        &self.inbox
    }

    pub fn deployed_pipeline(&self) -> Option<String> {
        self.deployment
            .read()
            .as_ref()
            .map(|d| d.exec.pipeline.spec().id.clone())
    }

    pub(crate) fn deployment(&self) -> Option<Arc<Deployment>> {
        self.deployment.read().clone()
    }

    fn enqueued(&self) {
        self.queued.fetch_add(1, Ordering::Relaxed);
    }

    fn dequeued(&self, n: usize) {
        self.queued.fetch_sub(n as u64, Ordering::Relaxed);
    }

    /// Fault injection for response frames, off unless configured.
    fn fault_drop(&self) -> bool {
        match &self.fault {
            Some(state) => {
                let mut state = state.lock();
                let p = state.0;
                state.1.random_bool(p.clamp(0.0, 1.0))
            }
            None => false,
        }
    }

    fn deploy(self: &Arc<Self>, document: &[u8]) -> Result<(), String> {
        let doc: DeployDocument = serde_json::from_slice(document).map_err(|e| format!("deploy document: {e}"))?;
        if !doc.workers.iter().any(|p| p.worker_id == self.id) {
            return Err(format!("worker {} is not a participant", self.id));
        }
        let plan = plan_serving(&doc.pipeline, &doc.config)?;
        let catalog = self.tables.read().clone();
        let pipeline = CompiledPipeline::new(&doc.pipeline, ExecMode::Serving, &catalog).map_err(|e| e.to_string())?;
        let peers = Arc::new(Peers::new(
            doc.workers
                .iter()
                .map(|p| (p.worker_id, p.internal_address.clone())),
        ));
        let workers = doc.workers.iter().map(|p| p.worker_id).collect();
        self.registry.set_timeout_ms(doc.config.request_timeout_ms);
        let exec = Arc::new(Exec::new(pipeline, plan, doc.config, workers, peers));
        let (tx, rx) = mpsc::unbounded_channel();
        tokio::spawn(engine::schedule(exec.clone(), self.clone(), rx));
        let previous = self.deployment.write().replace(Arc::new(Deployment { exec, tx }));
        if let Some(previous) = previous {
            tracing::info!(pipeline = %previous.exec.pipeline.spec().id, "replacing deployed pipeline");
        }
        Ok(())
    }
}

struct Internal(Arc<WorkerShared>);

impl FrameHandler for Internal {
    fn handle(&self, frame: Frame) -> HandlerFuture<'_> {
        Box::pin(async move {
            let shared = &self.0;
            match frame {
                Frame::Response { id, response } => {
                    Metrics::inc(&shared.metrics.response_frames_received);
                    if id.worker_id != shared.id {
                        tracing::warn!(%id, "response frame for another worker");
                        Metrics::inc(&shared.metrics.routing_errors);
                    } else {
                        shared.registry.complete(id, response);
                    }
                    None
                }
                Frame::Shuffle(frame) if frame.exchange_id != 0 => {
                    shared.inbox.deliver(frame);
                    None
                }
                Frame::Shuffle(frame) => {
                    Metrics::inc(&shared.metrics.shuffle_frames_received);
                    let Some(dep) = shared.deployment() else {
                        Metrics::inc(&shared.metrics.routing_errors);
                        return None;
                    };
                    let stage = frame.stage_index as usize;
                    if dep.exec.pipeline.spec().id != frame.pipeline_id || stage >= dep.exec.pipeline.stage_count() {
                        tracing::warn!(pipeline = %frame.pipeline_id, stage, "shuffle frame for a pipeline not deployed here");
                        Metrics::inc(&shared.metrics.routing_errors);
                        return None;
                    }
                    match frame.decode_rows(dep.exec.pipeline.schema_before(stage)) {
                        Ok(rows) => {
                            tokio::spawn(dep.exec.clone().process(shared.clone(), rows, stage, true));
                        }
                        Err(e) => {
                            tracing::warn!(error = %e, "undecodable shuffle rows");
                            Metrics::inc(&shared.metrics.routing_errors);
                        }
                    }
                    None
                }
                Frame::Broadcast {
                    correlation,
                    table_id,
                    schema_json,
                    digest,
                    row_count,
                    rows,
                } => Some(match receive_table(&table_id, &schema_json, &digest, row_count, &rows) {
                    Ok((table, local)) => {
                        shared.tables.write().insert(table_id, Arc::new(table));
                        Frame::Ack {
                            correlation,
                            ok: true,
                            digest: local,
                            message: String::new(),
                        }
                    }
                    Err(message) => Frame::Ack {
                        correlation,
                        ok: false,
                        digest: [0; 32],
                        message,
                    },
                }),
                Frame::Deploy { correlation, document } => {
                    let result = shared.deploy(&document);
                    if let Err(message) = &result {
                        tracing::warn!(%message, "deploy rejected");
                    }
                    Some(Frame::Ack {
                        correlation,
                        ok: result.is_ok(),
                        digest: [0; 32],
                        message: result.err().unwrap_or_default(),
                    })
                }
                Frame::Ack { .. } => None,
            }
        })
    }

    fn protocol_error(&self, peer: SocketAddr, error: &FrameError) {
        tracing::warn!(%peer, %error, "resetting internal connection after protocol error");
        Metrics::inc(&self.0.metrics.routing_errors);
    }
}

pub struct WorkerHandle {
    shared: Arc<WorkerShared>,
    public_addr: SocketAddr,
    internal_addr: SocketAddr,
    config: WorkerConfig,
    driver: Option<DriverClient>,
    stops: Vec<watch::Sender<bool>>,
}

impl WorkerHandle {
    pub fn id(&self) -> u32 {
        self.shared.id
    }

    pub fn public_addr(&self) -> SocketAddr {
        self.public_addr
    }

    pub fn internal_addr(&self) -> SocketAddr {
        self.internal_addr
    }

    pub fn shared(&self) -> &Arc<WorkerShared> {
        &self.shared
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.shared.snapshot()
    }

    /// Stops accepting requests, lets in-flight ones finish for up to the
    /// drain grace, then answers the rest with 503 and closes all sockets.
    pub async fn drain(self) -> usize {
        self.shared.draining.store(true, Ordering::SeqCst);
        if let Some(driver) = &self.driver {
            let beat = Heartbeat {
                queue_depth: self.shared.queue_depth(),
                draining: true,
            };
            let _ = driver.heartbeat(self.shared.id, &beat).await;
        }
        let deadline = tokio::time::Instant::now() + Duration::from_millis(self.config.drain_grace_ms);
        while !self.shared.registry.is_empty() && tokio::time::Instant::now() < deadline {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        let cut = self.shared.registry.shutdown(503);
        self.shared.deployment.write().take();
        for stop in &self.stops {
            let _ = stop.send(true);
        }
        cut
    }
}

/// Binds both listeners, registers with the driver (if any) and starts the
/// heartbeat, expiry sweep, ingress and internal services.
pub async fn start_worker(config: WorkerConfig) -> Result<WorkerHandle, String> {
    start_worker_with_clock(config, Arc::new(SystemClock)).await
}

pub async fn start_worker_with_clock(config: WorkerConfig, clock: Arc<dyn Clock>) -> Result<WorkerHandle, String> {
    let public = TcpListener::bind(&config.public_bind)
        .await
        .map_err(|e| format!("bind public {}: {e}", config.public_bind))?;
    let internal = TcpListener::bind(&config.internal_bind)
        .await
        .map_err(|e| format!("bind internal {}: {e}", config.internal_bind))?;
    let public_addr = public.local_addr().map_err(|e| e.to_string())?;
    let internal_addr = internal.local_addr().map_err(|e| e.to_string())?;

    let driver = config.driver.as_deref().map(DriverClient::new);
    let id = match &driver {
        Some(driver) => {
            let reg = Registration {
                public_address: public_addr.to_string(),
                internal_address: internal_addr.to_string(),
            };
            register_with_retry(driver, &reg).await?
        }
        None => config.worker_id,
    };
    let shared = Arc::new(WorkerShared::new(id, clock, &config));

    let mut stops = vec![
        serve_frames(internal, Arc::new(Internal(shared.clone()))),
        ingress::serve_public(public, shared.clone()),
    ];

    let (stop, mut stopped) = watch::channel(false);
    let sweeper = shared.clone();
    let sweep_every = Duration::from_millis(config.sweep_ms.max(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(sweep_every);
        loop {
            tokio::select! {
                _ = stopped.changed() => break,
                _ = tick.tick() => {
                    let expired = sweeper.registry.expire(sweeper.now_ms());
                    if !expired.is_empty() {
                        tracing::debug!(count = expired.len(), "expired requests");
                    }
                }
            }
        }
    });
    stops.push(stop);

    if let Some(driver) = driver.clone() {
        let (stop, mut stopped) = watch::channel(false);
        let beater = shared.clone();
        let every = Duration::from_millis(config.heartbeat_ms.max(1));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tokio::select! {
                    _ = stopped.changed() => break,
                    _ = tick.tick() => {
                        let beat = Heartbeat {
                            queue_depth: beater.queue_depth(),
                            draining: beater.is_draining(),
                        };
                        if let Err(e) = driver.heartbeat(beater.id, &beat).await {
                            tracing::warn!(error = %e, "heartbeat failed");
                        }
                    }
                }
            }
        });
        stops.push(stop);
    }

    tracing::info!(worker = id, public = %public_addr, internal = %internal_addr, "worker started");
    Ok(WorkerHandle {
        shared,
        public_addr,
        internal_addr,
        config,
        driver,
        stops,
    })
}

async fn register_with_retry(driver: &DriverClient, reg: &Registration) -> Result<u32, String> {
    let deadline = tokio::time::Instant::now() + Duration::from_secs(30);
    let mut backoff = Duration::from_millis(50);
    loop {
        match driver.register(reg).await {
            Ok(status) => return Ok(status.worker_id),
            Err(e) if e.status().is_some() => return Err(format!("registration rejected: {e}")),
            Err(e) => {
                if tokio::time::Instant::now() + backoff > deadline {
                    return Err(format!("driver unreachable: {e}"));
                }
                tokio::time::sleep(backoff).await;
                backoff = (backoff * 2).min(Duration::from_secs(1));
            }
        }
    }
}
