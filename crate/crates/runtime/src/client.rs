//! Small JSON client for the driver API, used by workers and the CLI.

use std::path::Path;

use flowserve_core::http_client::{ClientConfig, HttpClient};
use flowserve_core::row::HttpRequestData;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::driver::{DriverMetrics, PipelineStatus};
use crate::monitor::{Heartbeat, Registration, WorkerStatus};
use crate::serving::{MetricsSnapshot, ServingConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {message}")]
    Transport { url: String, message: String },
    #[error("{status} from {url}: {message}")]
    Status { url: String, status: u16, message: String },
    #[error("unexpected response from {url}: {message}")]
    Decode { url: String, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Clone)]
pub struct DriverClient {
    base: String,
    http: HttpClient,
}

fn percent_encode_query(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for b in value.bytes() {
        if b.is_ascii_alphanumeric() || b"-._~/".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

impl DriverClient {
    /// `addr` is `host:port`, optionally prefixed with `http://`.
    pub fn new(addr: &str) -> Self {
        let base = if addr.starts_with("http://") {
            addr.trim_end_matches('/').to_string()
        } else {
            format!("http://{}", addr.trim_end_matches('/'))
        };
        let config = ClientConfig {
            request_timeout_ms: 60_000,
            ..ClientConfig::default()
        };
        Self {
            base,
            http: HttpClient::new(config),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn call<T: DeserializeOwned>(&self, method: &str, path: &str, body: Vec<u8>) -> Result<T, ClientError> {
        let url = format!("{}{}", self.base, path);
        let req = HttpRequestData::new(method, url.clone())
            .with_header("content-type", "application/json")
            .with_body(body);
        let resp = self.http.send(&req).await.map_err(|message| ClientError::Transport {
            url: url.clone(),
            message,
        })?;
        if !(200..300).contains(&resp.status) {
            let message = serde_json::from_slice::<serde_json::Value>(&resp.body)
                .ok()
                .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
                .unwrap_or_else(|| String::from_utf8_lossy(&resp.body).into_owned());
            return Err(ClientError::Status {
                url,
                status: resp.status,
                message,
            });
        }
        serde_json::from_slice(&resp.body).map_err(|e| ClientError::Decode {
            url,
            message: e.to_string(),
        })
    }

    fn json<T: Serialize>(value: &T) -> Vec<u8> {
        serde_json::to_vec(value).expect("request bodies serialize")
    }

    pub async fn register(&self, reg: &Registration) -> Result<WorkerStatus, ClientError> {
        self.call("POST", "/v1/workers", Self::json(reg)).await
    }

    pub async fn heartbeat(&self, worker_id: u32, beat: &Heartbeat) -> Result<WorkerStatus, ClientError> {
        self.call("POST", &format!("/v1/workers/{worker_id}/heartbeat"), Self::json(beat))
            .await
    }

    pub async fn list_workers(&self) -> Result<Vec<WorkerStatus>, ClientError> {
        self.call("GET", "/v1/workers", Vec::new()).await
    }

    /// Submits a pipeline document; CSV tables resolve against `base_dir`
    /// on the driver's filesystem.
    pub async fn submit(&self, document: &str, base_dir: Option<&Path>) -> Result<PipelineStatus, ClientError> {
        let path = match base_dir {
            Some(dir) => format!("/v1/pipelines?base={}", percent_encode_query(&dir.to_string_lossy())),
            None => "/v1/pipelines".to_string(),
        };
        self.call("POST", &path, document.as_bytes().to_vec()).await
    }

    pub async fn serve(&self, pipeline_id: &str, config: &ServingConfig) -> Result<PipelineStatus, ClientError> {
        self.call("POST", &format!("/v1/pipelines/{pipeline_id}/serve"), Self::json(config))
            .await
    }

    pub async fn pipeline(&self, pipeline_id: &str) -> Result<PipelineStatus, ClientError> {
        self.call("GET", &format!("/v1/pipelines/{pipeline_id}"), Vec::new()).await
    }

    pub async fn metrics(&self) -> Result<DriverMetrics, ClientError> {
        self.call("GET", "/v1/metrics", Vec::new()).await
    }
}

/// Reads `GET /v1/metrics` from a worker's public address.
pub async fn worker_metrics(http: &HttpClient, public_addr: &str) -> Result<MetricsSnapshot, ClientError> {
    let url = format!("http://{public_addr}/v1/metrics");
    let resp = http
        .send(&HttpRequestData::new("GET", url.clone()))
        .await
        .map_err(|message| ClientError::Transport {
            url: url.clone(),
            message,
        })?;
    if resp.status != 200 {
        return Err(ClientError::Status {
            url,
            status: resp.status,
            message: String::from_utf8_lossy(&resp.body).into_owned(),
        });
    }
    serde_json::from_slice(&resp.body).map_err(|e| ClientError::Decode {
        url,
        message: e.to_string(),
    })
}
