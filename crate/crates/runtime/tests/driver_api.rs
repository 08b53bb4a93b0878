use std::sync::Arc;

use flowserve_core::http_client::{ClientConfig, HttpClient};
use flowserve_core::row::HttpRequestData;
use flowserve_runtime::client::DriverClient;
use flowserve_runtime::driver::{start_driver, PipelineState};
use flowserve_runtime::monitor::{Heartbeat, Registration, WorkerState};
use flowserve_runtime::serving::ServingConfig;
use flowserve_runtime::MockClock;

fn reg(public: &str, internal: &str) -> Registration {
    Registration {
        public_address: public.into(),
        internal_address: internal.into(),
    }
}

#[tokio::test]
async fn registration_heartbeats_and_liveness() {
    let clock = MockClock::new(1_000_000);
    let driver = start_driver("127.0.0.1:0", Arc::new(clock.clone()), 2000).await.unwrap();
    let api = DriverClient::new(&driver.addr().to_string());

    let a = api.register(&reg("127.0.0.1:7001", "127.0.0.1:7101")).await.unwrap();
    let b = api.register(&reg("127.0.0.1:7002", "127.0.0.1:7102")).await.unwrap();
    assert_eq!((a.worker_id, b.worker_id), (0, 1));
    assert_eq!(a.state, WorkerState::Registering);
    let a = api.heartbeat(0, &Heartbeat::default()).await.unwrap();
    assert_eq!(a.state, WorkerState::Serving);

    let dup = api.register(&reg("127.0.0.1:7001", "127.0.0.1:7103")).await.unwrap_err();
    assert_eq!(dup.status(), Some(409));
    let bad = api.register(&reg("not an address", "127.0.0.1:7104")).await.unwrap_err();
    assert_eq!(bad.status(), Some(400));

    clock.advance(5_000);
    api.heartbeat(1, &Heartbeat { queue_depth: 4, draining: false }).await.unwrap();
    clock.advance(1_000);
    let workers = api.list_workers().await.unwrap();
    assert_eq!(workers[0].state, WorkerState::Dead);
    assert_eq!(workers[1].state, WorkerState::Serving);
    assert_eq!(workers[1].queue_depth, 4);

    let gone = api.heartbeat(0, &Heartbeat::default()).await.unwrap_err();
    assert_eq!(gone.status(), Some(410));
    let unknown = api.heartbeat(9, &Heartbeat::default()).await.unwrap_err();
    assert_eq!(unknown.status(), Some(404));

    let drain = api.heartbeat(1, &Heartbeat { queue_depth: 0, draining: true }).await.unwrap();
    assert_eq!(drain.state, WorkerState::Draining);
    driver.shutdown().await;
}

#[tokio::test]
async fn pipelines_are_validated_on_submit_and_serve() {
    let driver = start_driver("127.0.0.1:0", Arc::new(MockClock::new(0)), 2000).await.unwrap();
    let api = DriverClient::new(&driver.addr().to_string());

    let err = api.submit("{\"version\":\"v1\"}", None).await.unwrap_err();
    assert_eq!(err.status(), Some(400));

    let select = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../pipelines/select.json")).unwrap();
    let status = api.submit(&select, None).await.unwrap();
    assert_eq!(status.state, PipelineState::Submitted);
    assert_eq!(status.stages.len(), 2);
    assert_eq!(api.pipeline("select").await.unwrap().id, "select");
    assert_eq!(api.pipeline("nope").await.unwrap_err().status(), Some(404));

    // No workers registered yet.
    let err = api.serve("select", &ServingConfig::default()).await.unwrap_err();
    assert_eq!(err.status(), Some(503));

    let join = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../pipelines/join.json")).unwrap();
    let err = api.submit(&join, Some(std::path::Path::new("/nonexistent"))).await.unwrap_err();
    assert_eq!(err.status(), Some(400));
    driver.shutdown().await;
}

#[tokio::test]
async fn data_plane_traffic_is_refused_and_counted() {
    let driver = start_driver("127.0.0.1:0", Arc::new(MockClock::new(0)), 2000).await.unwrap();
    let http = HttpClient::new(ClientConfig::default());
    let url = format!("http://{}/score", driver.addr());
    let resp = http
        .send(&HttpRequestData::new("POST", url).with_body(b"x".to_vec()))
        .await
        .unwrap();
    assert_eq!(resp.status, 404);
    let api = DriverClient::new(&driver.addr().to_string());
    let m = api.metrics().await.unwrap();
    assert_eq!(m.data_plane_requests, 1);
    driver.shutdown().await;
}
