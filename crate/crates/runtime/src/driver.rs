//! Driver process: monitor service, pipeline submission and serving launch.
//!
//! ```text
//! POST /v1/workers                    register      {publicAddress, internalAddress}
//! POST /v1/workers/{id}/heartbeat     heartbeat     {queueDepth, draining}
//! GET  /v1/workers                    list_workers
//! POST /v1/pipelines[?base=DIR]       submit pipeline JSON; CSV tables resolve against DIR
//! GET  /v1/pipelines                  all pipeline statuses
//! GET  /v1/pipelines/{id}             one pipeline status
//! POST /v1/pipelines/{id}/serve       broadcast tables and deploy with a ServingConfig
//! GET  /v1/metrics                    driver counters
//! ```
//!
//! The driver never carries serving traffic. Any other path answers 404 and
//! increments `dataPlaneRequests`, which stays zero when clients talk to
//! workers directly.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use flowserve_core::pipeline::{load_tables, parse_pipeline, Catalog, PipelineSpec, StageClass};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::time::Instant;

use crate::broadcast::{distribute_broadcast, hex, next_correlation};
use crate::clock::Clock;
use crate::frame::Frame;
use crate::monitor::{Heartbeat, Monitor, MonitorError, Registration, WorkerStatus};
use crate::serving::{plan_serving, ServingConfig};
use crate::transport::request;

const BROADCAST_DEADLINE: Duration = Duration::from_secs(10);
const DEPLOY_DEADLINE: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineState {
    Submitted,
    Serving,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageInfo {
    pub kind: String,
    pub class: StageClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PipelineStatus {
    pub id: String,
    pub state: PipelineState,
    pub stages: Vec<StageInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub serving_config: Option<ServingConfig>,
    /// Workers the pipeline is deployed on, by id.
    #[serde(default)]
    pub workers: Vec<u32>,
    /// Public ingress addresses clients (or a load balancer) should use.
    #[serde(default)]
    pub public_addresses: Vec<String>,
    /// Table digests acknowledged by every worker, hex encoded.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub table_digests: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Participant {
    pub worker_id: u32,
    pub internal_address: String,
}

/// Body of a DEPLOY frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeployDocument {
    pub pipeline: PipelineSpec,
    pub config: ServingConfig,
    pub workers: Vec<Participant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DriverMetrics {
    pub control_requests: u64,
    pub data_plane_requests: u64,
}

struct Record {
    spec: PipelineSpec,
    catalog: Catalog,
    status: PipelineStatus,
}

pub struct DriverState {
    monitor: Monitor,
    pipelines: Mutex<BTreeMap<String, Record>>,
    /// Serializes serve calls so deployments do not interleave.
    deploying: tokio::sync::Mutex<()>,
    control_requests: AtomicU64,
    data_plane_requests: AtomicU64,
}

impl DriverState {
    pub fn new(clock: Arc<dyn Clock>, heartbeat_ms: u64) -> Self {
        Self {
            monitor: Monitor::new(clock, heartbeat_ms),
            pipelines: Mutex::new(BTreeMap::new()),
            deploying: tokio::sync::Mutex::new(()),
            control_requests: AtomicU64::new(0),
            data_plane_requests: AtomicU64::new(0),
        }
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn metrics(&self) -> DriverMetrics {
        DriverMetrics {
            control_requests: self.control_requests.load(Ordering::Relaxed),
            data_plane_requests: self.data_plane_requests.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<MonitorError> for ApiError {
    fn from(e: MonitorError) -> Self {
        let status = match e {
            MonitorError::BadAddress(_) => StatusCode::BAD_REQUEST,
            MonitorError::Conflict { .. } => StatusCode::CONFLICT,
            MonitorError::UnknownWorker(_) => StatusCode::NOT_FOUND,
            MonitorError::Dead(_) => StatusCode::GONE,
        };
        ApiError(status, e.to_string())
    }
}

type Shared = Arc<DriverState>;

fn count(state: &DriverState) {
    state.control_requests.fetch_add(1, Ordering::Relaxed);
}

fn json_body<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let text = if bytes.iter().all(u8::is_ascii_whitespace) { b"{}".as_slice() } else { bytes };
    serde_json::from_slice(text).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))
}

async fn register(State(state): State<Shared>, body: axum::body::Bytes) -> Result<Response, ApiError> {
    count(&state);
    let reg: Registration = json_body(&body)?;
    let status = state.monitor.register(&reg)?;
    tracing::info!(worker = status.worker_id, public = %status.public_address, "worker registered");
    Ok((StatusCode::CREATED, Json(status)).into_response())
}

async fn heartbeat(
    State(state): State<Shared>,
    Path(id): Path<u32>,
    body: axum::body::Bytes,
) -> Result<Json<WorkerStatus>, ApiError> {
    count(&state);
    let beat: Heartbeat = json_body(&body)?;
    Ok(Json(state.monitor.heartbeat(id, &beat)?))
}

async fn list_workers(State(state): State<Shared>) -> Json<Vec<WorkerStatus>> {
    count(&state);
    Json(state.monitor.list_workers())
}

#[derive(Debug, Deserialize)]
struct SubmitQuery {
    base: Option<String>,
}

fn stage_infos(spec: &PipelineSpec) -> Vec<StageInfo> {
    spec.stages
        .iter()
        .map(|s| StageInfo {
            kind: s.kind().to_string(),
            class: s.classify(),
        })
        .collect()
}

async fn submit(
    State(state): State<Shared>,
    Query(query): Query<SubmitQuery>,
    body: String,
) -> Result<Response, ApiError> {
    count(&state);
    let spec = parse_pipeline(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let base = query.base.map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    let catalog = load_tables(&spec, &base).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let status = PipelineStatus {
        id: spec.id.clone(),
        state: PipelineState::Submitted,
        stages: stage_infos(&spec),
        serving_config: None,
        workers: Vec::new(),
        public_addresses: Vec::new(),
        table_digests: BTreeMap::new(),
        error: None,
    };
    state.pipelines.lock().insert(
        spec.id.clone(),
        Record {
            spec,
            catalog,
            status: status.clone(),
        },
    );
    Ok((StatusCode::CREATED, Json(status)).into_response())
}

async fn list_pipelines(State(state): State<Shared>) -> Json<Vec<PipelineStatus>> {
    count(&state);
    Json(state.pipelines.lock().values().map(|r| r.status.clone()).collect())
}

async fn pipeline_status(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<PipelineStatus>, ApiError> {
    count(&state);
    state
        .pipelines
        .lock()
        .get(&id)
        .map(|r| Json(r.status.clone()))
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown pipeline {id:?}")))
}

async fn serve(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> Result<Json<PipelineStatus>, ApiError> {
    count(&state);
    let config: ServingConfig = json_body(&body)?;
    let _guard = state.deploying.lock().await;
    let (spec, catalog) = {
        let pipelines = state.pipelines.lock();
        let record = pipelines
            .get(&id)
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown pipeline {id:?}")))?;
        (record.spec.clone(), record.catalog.clone())
    };
    plan_serving(&spec, &config).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e))?;
    for decl in &spec.tables {
        if !catalog.contains_key(&decl.id) {
            return Err(ApiError(
                StatusCode::BAD_REQUEST,
                format!("table {:?} has no data; declare a csv path", decl.id),
            ));
        }
    }
    let workers = state.monitor.serving_workers();
    if workers.is_empty() {
        return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "no serving workers".into()));
    }
    let result = deploy(&spec, &config, &catalog, &workers).await;
    let mut pipelines = state.pipelines.lock();
    let record = pipelines
        .get_mut(&id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("pipeline {id:?} was removed")))?;
    match result {
        Ok(digests) => {
            record.status = PipelineStatus {
                state: PipelineState::Serving,
                serving_config: Some(config),
                workers: workers.iter().map(|w| w.worker_id).collect(),
                public_addresses: workers.iter().map(|w| w.public_address.clone()).collect(),
                table_digests: digests,
                error: None,
                ..record.status.clone()
            };
            Ok(Json(record.status.clone()))
        }
        Err(message) => {
            record.status.state = PipelineState::Failed;
            record.status.error = Some(message.clone());
            Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, message))
        }
    }
}

async fn deploy(
    spec: &PipelineSpec,
    config: &ServingConfig,
    catalog: &Catalog,
    workers: &[WorkerStatus],
) -> Result<BTreeMap<String, String>, String> {
    let targets: Vec<(u32, String)> = workers
        .iter()
        .map(|w| (w.worker_id, w.internal_address.clone()))
        .collect();
    let mut digests = BTreeMap::new();
    for decl in &spec.tables {
        let table = &catalog[&decl.id];
        let acks = distribute_broadcast(table, &targets, Instant::now() + BROADCAST_DEADLINE)
            .await
            .map_err(|e| e.to_string())?;
        if let Some(first) = acks.first() {
            digests.insert(decl.id.clone(), hex(&first.digest));
        }
    }
    let document = DeployDocument {
        pipeline: spec.clone(),
        config: config.clone(),
        workers: workers
            .iter()
            .map(|w| Participant {
                worker_id: w.worker_id,
                internal_address: w.internal_address.clone(),
            })
            .collect(),
    };
    let bytes = serde_json::to_vec(&document).expect("deploy documents serialize");
    let deadline = Instant::now() + DEPLOY_DEADLINE;
    let mut set = tokio::task::JoinSet::new();
    for (worker, addr) in targets {
        let frame = Frame::Deploy {
            correlation: next_correlation(),
            document: bytes.clone(),
        };
        set.spawn(async move { (worker, request(worker, &addr, &frame, deadline).await) });
    }
    while let Some(joined) = set.join_next().await {
        let (worker, reply) = joined.map_err(|e| e.to_string())?;
        match reply {
            Ok(Frame::Ack { ok: true, .. }) => {}
            Ok(Frame::Ack { message, .. }) => return Err(format!("deploy failed on worker {worker}: {message}")),
            Ok(other) => return Err(format!("worker {worker} answered deploy with frame kind {}", other.kind())),
            Err(e) => return Err(format!("deploy failed: {e}")),
        }
    }
    Ok(digests)
}

async fn driver_metrics(State(state): State<Shared>) -> Json<DriverMetrics> {
    Json(state.metrics())
}

async fn fallback(State(state): State<Shared>) -> ApiError {
    state.data_plane_requests.fetch_add(1, Ordering::Relaxed);
    ApiError(
        StatusCode::NOT_FOUND,
        "the driver does not serve pipeline traffic; send requests to a worker public address".into(),
    )
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/v1/workers", post(register).get(list_workers))
        .route("/v1/workers/{id}/heartbeat", post(heartbeat))
        .route("/v1/pipelines", post(submit).get(list_pipelines))
        .route("/v1/pipelines/{id}", get(pipeline_status))
        .route("/v1/pipelines/{id}/serve", post(serve))
        .route("/v1/metrics", get(driver_metrics))
        .fallback(fallback)
        .with_state(state)
}

pub struct DriverHandle {
    addr: SocketAddr,
    state: Shared,
    stop: watch::Sender<bool>,
    task: tokio::task::JoinHandle<()>,
}

impl DriverHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn state(&self) -> &Arc<DriverState> {
        &self.state
    }

    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        let _ = self.task.await;
    }

    /// Runs until the task ends (it only ends after `shutdown`).
    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

pub async fn start_driver(bind: &str, clock: Arc<dyn Clock>, heartbeat_ms: u64) -> std::io::Result<DriverHandle> {
    let listener = TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let state = Arc::new(DriverState::new(clock, heartbeat_ms));
    let app = router(state.clone());
    let (stop, mut stopped) = watch::channel(false);
    let task = tokio::spawn(async move {
        let shutdown = async move {
            let _ = stopped.wait_for(|s| *s).await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
            tracing::error!(error = %e, "driver server failed");
        }
    });
    Ok(DriverHandle {
        addr,
        state,
        stop,
        task,
    })
}
