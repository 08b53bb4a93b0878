//! Public HTTP listener. Each request becomes a row, waits in the exchange
//! registry and is answered with whatever reply is routed back to it.

use std::convert::Infallible;
use std::sync::Arc;

use bytes::Bytes;
use flowserve_core::row::{HttpRequestData, HttpResponseData, Row, Value};
use http_body_util::{BodyExt, Full};
use hyper::ext::ReasonPhrase;
use hyper::header::{HeaderName, HeaderValue};
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use tokio::net::TcpListener;
use tokio::sync::watch;

use super::{WorkerShared, SERVER_HEADER};
use crate::serving::Metrics;

const METRICS_PATH: &str = "/v1/metrics";

pub(super) fn serve_public(listener: TcpListener, shared: Arc<WorkerShared>) -> watch::Sender<bool> {
    let (stop, mut stopped) = watch::channel(false);
    tokio::spawn(async move {
        loop {
            tokio::select! {
                _ = stopped.changed() => break,
                accepted = listener.accept() => {
                    let (stream, _) = match accepted {
                        Ok(conn) => conn,
                        Err(e) => {
                            tracing::warn!(error = %e, "accept failed");
                            continue;
                        }
                    };
                    let _ = stream.set_nodelay(true);
                    let shared = shared.clone();
                    let mut stopped = stopped.clone();
                    tokio::spawn(async move {
                        let service = service_fn(move |req| handle(shared.clone(), req));
                        let conn = http1::Builder::new()
                            .keep_alive(true)
                            .serve_connection(TokioIo::new(stream), service);
                        tokio::pin!(conn);
                        tokio::select! {
                            _ = conn.as_mut() => {}
                            _ = stopped.changed() => {
                                conn.as_mut().graceful_shutdown();
                                let _ = conn.await;
                            }
                        }
                    });
                }
            }
        }
    });
    stop
}

fn plain(status: u16, body: impl Into<Bytes>) -> Response<Full<Bytes>> {
    let mut resp = Response::new(Full::new(body.into()));
    *resp.status_mut() = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    resp.headers_mut()
        .insert(hyper::header::SERVER, HeaderValue::from_static(SERVER_HEADER));
    resp
}

async fn handle(shared: Arc<WorkerShared>, req: Request<hyper::body::Incoming>) -> Result<Response<Full<Bytes>>, Infallible> {
    let path = req.uri().path().to_string();
    if path == METRICS_PATH && req.method() == hyper::Method::GET {
        let body = serde_json::to_vec(&shared.snapshot()).expect("metrics serialize");
        let mut resp = plain(200, body);
        resp.headers_mut().insert(
            hyper::header::CONTENT_TYPE,
            HeaderValue::from_static("application/json"),
        );
        return Ok(resp);
    }
    if shared.is_draining() {
        Metrics::inc(&shared.metrics.rejected_draining);
        return Ok(plain(503, "worker is draining"));
    }
    let Some(dep) = shared.deployment() else {
        return Ok(plain(503, "no pipeline is being served"));
    };
    if !path.starts_with(dep.exec.config.route_prefix.as_str()) {
        return Ok(plain(404, "no route"));
    }

    let (parts, body) = req.into_parts();
    let body = match body.collect().await {
        Ok(collected) => collected.to_bytes().to_vec(),
        Err(e) => return Ok(plain(400, format!("unreadable request body: {e}"))),
    };
    let target = parts
        .uri
        .path_and_query()
        .map(|pq| pq.as_str().to_string())
        .unwrap_or_else(|| path.clone());
    let mut request = HttpRequestData::new(parts.method.as_str(), target).with_body(body);
    for (name, value) in &parts.headers {
        request = request.with_header(name.as_str(), String::from_utf8_lossy(value.as_bytes()));
    }

    let (id, reply) = shared.registry.insert(shared.now_ms());
    let plan = &dep.exec.plan;
    let mut values = vec![Value::Null; dep.exec.pipeline.schema_before(0).len()];
    values[plan.input_id] = Value::RoutingId(id);
    values[plan.input_request] = Value::HttpRequest(Box::new(request));
    shared.enqueued();
    if dep.tx.send(Row::new(values)).is_err() {
        shared.dequeued(1);
        shared
            .registry
            .complete(id, HttpResponseData::new(503, b"pipeline was replaced".to_vec()));
    }
    drop(dep);

    let response = match reply.await {
        Ok(response) => response,
        Err(_) => HttpResponseData::new(503, b"worker shut down".to_vec()),
    };
    Ok(to_hyper(response))
}

fn to_hyper(response: HttpResponseData) -> Response<Full<Bytes>> {
    let mut resp = Response::new(Full::new(Bytes::from(response.body)));
    match StatusCode::from_u16(response.status) {
        Ok(status) => {
            *resp.status_mut() = status;
            if !response.reason.is_empty() && Some(response.reason.as_str()) != status.canonical_reason() {
                if let Ok(reason) = ReasonPhrase::try_from(response.reason.clone()) {
                    resp.extensions_mut().insert(reason);
                }
            }
        }
        Err(_) => *resp.status_mut() = StatusCode::INTERNAL_SERVER_ERROR,
    }
    let headers = resp.headers_mut();
    for (name, value) in &response.headers {
        let lower = name.to_ascii_lowercase();
        if matches!(lower.as_str(), "content-length" | "transfer-encoding" | "connection") {
            continue;
        }
        if let (Ok(name), Ok(value)) = (HeaderName::try_from(lower), HeaderValue::try_from(value.as_str())) {
            headers.append(name, value);
        }
    }
    if !headers.contains_key(hyper::header::SERVER) {
        headers.insert(hyper::header::SERVER, HeaderValue::from_static(SERVER_HEADER));
    }
    resp
}
