//! Scripted HTTP server used by tests and benchmarks.
//!
//! Scripts are YAML:
//!
//! ```yaml
//! routes:
//!   - path: /flaky          # exact path, query ignored; "*" matches any path
//!     method: GET           # optional
//!     responses:            # played in order, the last entry then repeats
//!       - status: 503
//!       - status: 503
//!       - status: 200
//!         body: ok
//!         delayMs: 5
//!         headers: { Content-Type: text/plain }
//!   - path: /echo
//!     responses:
//!       - { status: 200, echo: true, delayMs: 10 }
//! ```
//!
//! Requests that match no route get a 404.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper_util::rt::TokioIo;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::watch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScriptedResponse {
    pub status: u16,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub delay_ms: u64,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    /// Reply with the request body instead of `body`.
    #[serde(default)]
    pub echo: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScriptedRoute {
    pub path: String,
    #[serde(default)]
    pub method: Option<String>,
    pub responses: Vec<ScriptedResponse>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct MockScript {
    pub routes: Vec<ScriptedRoute>,
}

impl MockScript {
    pub fn from_yaml(text: &str) -> Result<Self, serde_yaml::Error> {
        serde_yaml::from_str(text)
    }
}

#[derive(Debug, Clone)]
pub struct Arrival {
    pub at: Instant,
    pub method: String,
    pub path: String,
    pub body: Vec<u8>,
}

/// Counters observed by the server; the in-flight gauge lets tests check
/// client concurrency limits.
#[derive(Debug, Default)]
pub struct MockStats {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    arrivals: Mutex<Vec<Arrival>>,
}

impl MockStats {
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn arrivals(&self) -> Vec<Arrival> {
        self.arrivals.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.arrivals.lock().unwrap().len()
    }
}

struct State {
    script: MockScript,
    hits: Mutex<Vec<usize>>,
    stats: Arc<MockStats>,
}

impl State {
    fn pick(&self, method: &str, path: &str) -> Option<ScriptedResponse> {
        let index = self.script.routes.iter().position(|r| {
            (r.path == "*" || r.path == path)
                && r.method.as_deref().map_or(true, |m| m.eq_ignore_ascii_case(method))
        })?;
        let route = &self.script.routes[index];
        let mut hits = self.hits.lock().unwrap();
        let n = hits[index];
        hits[index] += 1;
        route
            .responses
            .get(n.min(route.responses.len().saturating_sub(1)))
            .cloned()
    }
}

pub struct MockServer {
    addr: SocketAddr,
    stats: Arc<MockStats>,
    shutdown: watch::Sender<bool>,
}

impl MockServer {
    /// Binds to `bind` (use port 0 for an ephemeral port) and serves the
    /// script on the current tokio runtime.
    pub async fn start(script: MockScript, bind: SocketAddr) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind).await?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(MockStats::default());
        let state = Arc::new(State {
            hits: Mutex::new(vec![0; script.routes.len()]),
            script,
            stats: stats.clone(),
        });
        let (shutdown, mut stop) = watch::channel(false);
        tokio::spawn(async move {
            loop {
                tokio::select! {
                    _ = stop.changed() => break,
                    accepted = listener.accept() => {
                        let Ok((stream, _)) = accepted else { continue };
                        let _ = stream.set_nodelay(true);
                        let state = state.clone();
                        tokio::spawn(async move {
                            let service = service_fn(move |req| handle(state.clone(), req));
                            let _ = http1::Builder::new()
                                .serve_connection(TokioIo::new(stream), service)
                                .await;
                        });
                    }
                }
            }
        });
        Ok(Self {
            addr,
            stats,
            shutdown,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn stats(&self) -> &MockStats {
        &self.stats
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
    }
}

struct InFlight<'a>(&'a MockStats);

impl<'a> InFlight<'a> {
    fn enter(stats: &'a MockStats) -> Self {
        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Self(stats)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn handle(
    state: Arc<State>,
    req: hyper::Request<hyper::body::Incoming>,
) -> Result<hyper::Response<Full<Bytes>>, hyper::Error> {
    let _gauge = InFlight::enter(&state.stats);
    let method = req.method().to_string();
    let path = req.uri().path().to_string();
    let body = req.into_body().collect().await?.to_bytes().to_vec();
    state.stats.arrivals.lock().unwrap().push(Arrival {
        at: Instant::now(),
        method: method.clone(),
        path: path.clone(),
        body: body.clone(),
    });
    let Some(scripted) = state.pick(&method, &path) else {
        let mut resp = hyper::Response::new(Full::new(Bytes::new()));
        *resp.status_mut() = hyper::StatusCode::NOT_FOUND;
        return Ok(resp);
    };
    if scripted.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(scripted.delay_ms)).await;
    }
    let payload = if scripted.echo {
        body
    } else {
        scripted.body.into_bytes()
    };
    let mut builder = hyper::Response::builder().status(scripted.status);
    for (name, value) in &scripted.headers {
        builder = builder.header(name.as_str(), value.as_str());
    }
    Ok(builder
        .body(Full::new(Bytes::from(payload)))
        .unwrap_or_else(|_| {
            let mut resp = hyper::Response::new(Full::new(Bytes::new()));
            *resp.status_mut() = hyper::StatusCode::INTERNAL_SERVER_ERROR;
            resp
        }))
}
