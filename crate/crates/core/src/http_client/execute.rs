use std::future::Future;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::TokioExecutor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;
use tokio::time::Instant;

use super::bucket::Throttle;
use super::policy::RetryPolicy;
use crate::row::{canonical_reason, HttpRequestData, HttpResponseData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct ClientConfig {
    pub max_concurrent_per_partition: usize,
    /// Requests per second; unset means unlimited.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_limit_per_sec: Option<f64>,
    pub request_timeout_ms: u64,
    pub retry: RetryPolicy,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            max_concurrent_per_partition: 4,
            rate_limit_per_sec: None,
            request_timeout_ms: 10_000,
            retry: RetryPolicy::default(),
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_concurrent_per_partition == 0 {
            return Err("maxConcurrentPerPartition must be positive".into());
        }
        if let Some(rate) = self.rate_limit_per_sec {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err("rateLimitPerSec must be positive".into());
            }
        }
        if self.request_timeout_ms == 0 {
            return Err("requestTimeoutMs must be positive".into());
        }
        self.retry.validate().map_err(|e| e.to_string())
    }
}

/// Final failure of one request after retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CallError {
    /// Last HTTP status seen, if any attempt got a response.
    pub status: Option<u16>,
    pub attempts: u32,
    pub elapsed_ms: f64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct CallOutcome {
    pub result: Result<HttpResponseData, CallError>,
    pub attempts: u32,
    pub elapsed_ms: f64,
    /// Measured backoff waits between consecutive attempts.
    pub waits_ms: Vec<f64>,
}

type HyperClient = Client<HttpConnector, Full<Bytes>>;

/// HTTP/1.1 client owned by one partition's stage invocation.
#[derive(Clone)]
pub struct HttpClient {
    inner: HyperClient,
    config: Arc<ClientConfig>,
}

impl HttpClient {
    pub fn new(config: ClientConfig) -> Self {
        let mut connector = HttpConnector::new();
        connector.set_nodelay(true);
        let inner = Client::builder(TokioExecutor::new())
            .pool_idle_timeout(Duration::from_secs(30))
            .build(connector);
        Self {
            inner,
            config: Arc::new(config),
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// One network attempt, no retries.
    pub async fn send(&self, req: &HttpRequestData) -> Result<HttpResponseData, String> {
        let mut builder = http::Request::builder()
            .method(req.method.as_str())
            .uri(req.uri.as_str());
        for (name, value) in &req.headers {
            builder = builder.header(name.as_str(), value.as_str());
        }
        let request = builder
            .body(Full::new(Bytes::from(req.body.clone())))
            .map_err(|e| format!("invalid request: {e}"))?;
        let timeout = Duration::from_millis(self.config.request_timeout_ms);
        let exchange = async {
            let response = self
                .inner
                .request(request)
                .await
                .map_err(|e| format!("transport error: {e}"))?;
            let (parts, body) = response.into_parts();
            let body = body
                .collect()
                .await
                .map_err(|e| format!("body error: {e}"))?
                .to_bytes();
            let status = parts.status.as_u16();
            let reason = parts
                .extensions
                .get::<hyper::ext::ReasonPhrase>()
                .map(|r| String::from_utf8_lossy(r.as_bytes()).into_owned())
                .unwrap_or_else(|| canonical_reason(status).to_string());
            let headers = parts
                .headers
                .iter()
                .map(|(n, v)| {
                    (
                        n.as_str().to_string(),
                        String::from_utf8_lossy(v.as_bytes()).into_owned(),
                    )
                })
                .collect();
            Ok(HttpResponseData {
                status,
                reason,
                headers,
                body: body.to_vec(),
            })
        };
        match tokio::time::timeout(timeout, exchange).await {
            Ok(result) => result,
            Err(_) => Err(format!("timed out after {} ms", timeout.as_millis())),
        }
    }

    async fn call_with_retries(
        &self,
        req: &HttpRequestData,
        throttle: &Throttle,
        rng: &mut ChaCha8Rng,
    ) -> CallOutcome {
        let policy = &self.config.retry;
        let started = Instant::now();
        let mut waits_ms = Vec::new();
        let mut last_status = None;
        let mut last_message;
        let mut attempt = 0;
        loop {
            attempt += 1;
            throttle.acquire().await;
            match self.send(req).await {
                Ok(resp) if !policy.is_retryable(resp.status) => {
                    return CallOutcome {
                        result: Ok(resp),
                        attempts: attempt,
                        elapsed_ms: started.elapsed().as_secs_f64() * 1000.0,
                        waits_ms,
                    };
                }
                Ok(resp) => {
                    last_status = Some(resp.status);
                    last_message = format!("retryable status {}", resp.status);
                }
                Err(message) => {
                    last_message = message;
                    if !policy.retry_transport_errors {
                        break;
                    }
                }
            }
            if attempt > policy.max_retries {
                break;
            }
            let delay = policy
                .delay_ms(attempt, rng.random::<f64>())
                .expect("attempt within schedule");
            let wait_start = Instant::now();
            tokio::time::sleep(Duration::from_secs_f64(delay / 1000.0)).await;
            waits_ms.push(wait_start.elapsed().as_secs_f64() * 1000.0);
        }
        let elapsed_ms = started.elapsed().as_secs_f64() * 1000.0;
        CallOutcome {
            result: Err(CallError {
                status: last_status,
                attempts: attempt,
                elapsed_ms,
                message: last_message,
            }),
            attempts: attempt,
            elapsed_ms,
            waits_ms,
        }
    }

    /// Executes a partition's requests with bounded concurrency, throttling
    /// and retries. Output index `i` always answers input request `i`.
    pub async fn execute_partition(&self, requests: Vec<HttpRequestData>) -> Vec<CallOutcome> {
        let n = requests.len();
        let permits = Arc::new(Semaphore::new(self.config.max_concurrent_per_partition));
        let throttle = Arc::new(Throttle::new(self.config.rate_limit_per_sec));
        let mut tasks = JoinSet::new();
        for (index, req) in requests.into_iter().enumerate() {
            let client = self.clone();
            let permits = permits.clone();
            let throttle = throttle.clone();
            let mut rng = match self.config.retry.seed {
                Some(seed) => ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64)),
                None => ChaCha8Rng::from_os_rng(),
            };
            tasks.spawn(async move {
                let _permit = permits.acquire_owned().await.expect("semaphore open");
                let outcome = client.call_with_retries(&req, &throttle, &mut rng).await;
                (index, outcome)
            });
        }
        let mut slots: Vec<Option<CallOutcome>> = (0..n).map(|_| None).collect();
        while let Some(joined) = tasks.join_next().await {
            let (index, outcome) = joined.expect("request task panicked");
            slots[index] = Some(outcome);
        }
        slots.into_iter().map(|o| o.expect("every index resolved")).collect()
    }
}

pub async fn execute_partition(
    requests: Vec<HttpRequestData>,
    config: &ClientConfig,
) -> Vec<CallOutcome> {
    HttpClient::new(config.clone())
        .execute_partition(requests)
        .await
}

fn io_runtime() -> &'static tokio::runtime::Runtime {
    static RUNTIME: OnceLock<tokio::runtime::Runtime> = OnceLock::new();
    RUNTIME.get_or_init(|| {
        tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("flowserve-io")
            .enable_all()
            .build()
            .expect("io runtime")
    })
}

/// Drives `fut` to completion from synchronous code. Safe to call from inside
/// another runtime's thread: the wait then happens on a scoped helper thread.
pub fn block_on_io<F>(fut: F) -> F::Output
where
    F: Future + Send,
    F::Output: Send,
{
    if tokio::runtime::Handle::try_current().is_ok() {
        std::thread::scope(|s| {
            s.spawn(|| io_runtime().block_on(fut))
                .join()
                .expect("io helper thread panicked")
        })
    } else {
        io_runtime().block_on(fut)
    }
}
