use std::path::PathBuf;

use flowserve_core::http_client::{ClientConfig, HttpClient};
use flowserve_core::row::{HttpRequestData, HttpResponseData};
use flowserve_runtime::cluster::{ClusterOptions, LocalCluster};
use flowserve_runtime::serving::{ServingConfig, ServingMode};
use tokio::task::JoinSet;

fn pipelines_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../pipelines")
}

fn doc(name: &str) -> String {
    std::fs::read_to_string(pipelines_dir().join(format!("{name}.json"))).unwrap()
}

fn client() -> HttpClient {
    HttpClient::new(ClientConfig {
        request_timeout_ms: 20_000,
        ..ClientConfig::default()
    })
}

async fn post(http: &HttpClient, base: &str, body: &str) -> HttpResponseData {
    let req = HttpRequestData::new("POST", format!("{base}/score")).with_body(body.as_bytes().to_vec());
    http.send(&req).await.unwrap()
}

fn text(resp: &HttpResponseData) -> String {
    String::from_utf8(resp.body.clone()).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn select_echoes_the_request_body() {
    let cluster = LocalCluster::start(1).await.unwrap();
    let status = cluster.deploy(&doc("select"), None, &ServingConfig::default()).await.unwrap();
    assert_eq!(status.public_addresses.len(), 1);
    let http = client();
    let url = &cluster.urls()[0];
    let resp = post(&http, url, "hello").await;
    assert_eq!(resp.status, 200);
    assert_eq!(text(&resp), "hello");
    assert!(resp.header("server").is_some_and(|s| s.starts_with("flowserve/")));

    let m = cluster.total_metrics();
    assert_eq!(m.accepted, 1);
    assert_eq!(m.replied, 1);
    assert_eq!(m.open, 0);
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn filtered_rows_get_the_filtered_status() {
    let cluster = LocalCluster::start(2).await.unwrap();
    cluster.deploy(&doc("filter"), None, &ServingConfig::default()).await.unwrap();
    let http = client();
    for url in cluster.urls() {
        let short = post(&http, &url, "abc").await;
        assert_eq!(short.status, 204);
        assert!(short.body.is_empty());
        let long = post(&http, &url, "HeLLo").await;
        assert_eq!((long.status, text(&long)), (200, "hello".to_string()));
    }
    assert_eq!(cluster.total_metrics().filtered, 2);
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn route_prefix_and_metrics_path() {
    let cluster = LocalCluster::start(1).await.unwrap();
    let config = ServingConfig {
        route_prefix: "/api/".into(),
        ..ServingConfig::default()
    };
    cluster.deploy(&doc("select"), None, &config).await.unwrap();
    let http = client();
    let url = &cluster.urls()[0];
    assert_eq!(post(&http, url, "x").await.status, 404);
    let ok = http
        .send(&HttpRequestData::new("POST", format!("{url}/api/x")).with_body(b"y".to_vec()))
        .await
        .unwrap();
    assert_eq!((ok.status, text(&ok)), (200, "y".to_string()));
    let metrics = http
        .send(&HttpRequestData::new("GET", format!("{url}/v1/metrics")))
        .await
        .unwrap();
    let json: serde_json::Value = serde_json::from_slice(&metrics.body).unwrap();
    assert_eq!(json["accepted"], 1);
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn shuffle_replies_reach_their_own_clients() {
    let cluster = LocalCluster::start(3).await.unwrap();
    let config = ServingConfig {
        mode: ServingMode::Minibatch,
        max_batch_delay_ms: 5,
        ..ServingConfig::default()
    };
    cluster.deploy(&doc("shuffle"), None, &config).await.unwrap();
    let urls = cluster.urls();
    let http = client();
    let mut set = JoinSet::new();
    for i in 0..300 {
        let http = http.clone();
        let url = urls[i % urls.len()].clone();
        set.spawn(async move {
            let body = format!("key-{i}");
            let resp = post(&http, &url, &body).await;
            (body, resp)
        });
    }
    while let Some(joined) = set.join_next().await {
        let (body, resp) = joined.unwrap();
        assert_eq!(resp.status, 200);
        assert_eq!(text(&resp), body);
    }
    let m = cluster.total_metrics();
    assert_eq!(m.accepted, 300);
    assert_eq!(m.replied, 300);
    assert!(m.response_frames_sent > 0);
    assert_eq!(m.response_frames_sent, m.response_frames_received);
    assert!(m.shuffle_frames_sent > 0);
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn continuous_mode_rejects_wide_pipelines() {
    let cluster = LocalCluster::start(1).await.unwrap();
    let status = cluster.submit(&doc("shuffle"), None).await.unwrap();
    let err = cluster.serve(&status.id, &ServingConfig::default()).await.unwrap_err();
    assert!(matches!(err.status(), Some(s) if (400..500).contains(&s)), "{err}");
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn broadcast_join_answers_from_every_worker() {
    let cluster = LocalCluster::start(2).await.unwrap();
    let status = cluster
        .deploy(&doc("join"), Some(&pipelines_dir()), &ServingConfig::default())
        .await
        .unwrap();
    assert_eq!(status.table_digests.len(), 1);
    let http = client();
    for url in cluster.urls() {
        let resp = post(&http, &url, "apple").await;
        assert_eq!((resp.status, text(&resp)), (200, "apple fruit 1.25".to_string()));
        let resp = post(&http, &url, "cheese").await;
        assert_eq!(text(&resp), "cheese dairy 7.75");
        assert_eq!(post(&http, &url, "durian").await.status, 204);
    }
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn aggregate_counts_within_a_batch() {
    let cluster = LocalCluster::start(1).await.unwrap();
    let config = ServingConfig {
        mode: ServingMode::Minibatch,
        max_batch_size: 5,
        max_batch_delay_ms: 2_000,
        ..ServingConfig::default()
    };
    cluster.deploy(&doc("aggregate"), None, &config).await.unwrap();
    let url = cluster.urls()[0].clone();
    let http = client();
    let mut set = JoinSet::new();
    for body in ["a", "b", "a", "a", "b"] {
        let (http, url) = (http.clone(), url.clone());
        set.spawn(async move { text(&post(&http, &url, body).await) });
    }
    let mut got = Vec::new();
    while let Some(joined) = set.join_next().await {
        got.push(joined.unwrap());
    }
    got.sort();
    assert_eq!(got, ["a:3", "a:3", "a:3", "b:2", "b:2"]);
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn aggregate_groups_across_workers() {
    let cluster = LocalCluster::start(2).await.unwrap();
    let config = ServingConfig {
        mode: ServingMode::Minibatch,
        max_batch_delay_ms: 50,
        ..ServingConfig::default()
    };
    cluster.deploy(&doc("aggregate"), None, &config).await.unwrap();
    let urls = cluster.urls();
    let http = client();
    let mut set = JoinSet::new();
    for i in 0..40 {
        let (http, url) = (http.clone(), urls[i % 2].clone());
        set.spawn(async move {
            let key = format!("k{}", i % 4);
            (key.clone(), post(&http, &url, &key).await)
        });
    }
    while let Some(joined) = set.join_next().await {
        let (key, resp) = joined.unwrap();
        assert_eq!(resp.status, 200);
        let body = text(&resp);
        let (k, n) = body.split_once(':').unwrap();
        assert_eq!(k, key);
        assert!(n.parse::<u32>().unwrap() >= 1);
    }
    assert_eq!(cluster.total_metrics().replied, 40);
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn dropped_replies_time_out_exactly_once() {
    let cluster = LocalCluster::start_with(ClusterOptions {
        workers: 2,
        drop_response_frames: 1.0,
        ..ClusterOptions::default()
    })
    .await
    .unwrap();
    let config = ServingConfig {
        mode: ServingMode::Minibatch,
        max_batch_delay_ms: 5,
        request_timeout_ms: 300,
        ..ServingConfig::default()
    };
    cluster.deploy(&doc("shuffle"), None, &config).await.unwrap();
    let urls = cluster.urls();
    let http = client();
    let mut set = JoinSet::new();
    for i in 0..60 {
        let (http, url) = (http.clone(), urls[i % 2].clone());
        set.spawn(async move { post(&http, &url, &format!("v{i}")).await.status });
    }
    let mut ok = 0;
    let mut timed_out = 0;
    while let Some(joined) = set.join_next().await {
        match joined.unwrap() {
            200 => ok += 1,
            504 => timed_out += 1,
            other => panic!("unexpected status {other}"),
        }
    }
    assert!(timed_out > 0 && ok > 0, "ok {ok} timed out {timed_out}");
    let m = cluster.total_metrics();
    assert_eq!(m.accepted, 60);
    assert_eq!(m.replied, ok);
    assert_eq!(m.timeouts, timed_out);
    assert_eq!(m.fault_dropped_frames, timed_out);
    cluster.shutdown().await;
}
