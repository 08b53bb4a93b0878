use std::time::Duration;

use flowserve_core::pipeline::BroadcastTable;
use flowserve_core::row::{DataType, Row, Schema, Value};
use flowserve_runtime::broadcast::{broadcast_frame, distribute_broadcast, hex};
use flowserve_runtime::frame::Frame;
use flowserve_runtime::worker::{start_worker, WorkerConfig, WorkerHandle};
use tokio::time::Instant;

fn table(n: usize) -> BroadcastTable {
    let schema = Schema::of(&[
        ("code", DataType::String),
        ("price", DataType::Float64),
        ("qty", DataType::Int64),
    ]);
    let rows = (0..n)
        .map(|i| {
            Row::new(vec![
                Value::from(format!("item-{i:05}")),
                Value::Float64(i as f64 * 0.25),
                Value::Int64(i as i64 % 17),
            ])
        })
        .collect();
    BroadcastTable::new("prices", schema, rows).unwrap()
}

async fn workers(n: u32) -> Vec<WorkerHandle> {
    let mut out = Vec::new();
    for worker_id in 0..n {
        out.push(
            start_worker(WorkerConfig {
                worker_id,
                ..WorkerConfig::default()
            })
            .await
            .unwrap(),
        );
    }
    out
}

fn targets(ws: &[WorkerHandle]) -> Vec<(u32, String)> {
    ws.iter().map(|w| (w.id(), w.internal_addr().to_string())).collect()
}

fn deadline() -> Instant {
    Instant::now() + Duration::from_secs(10)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn ten_thousand_rows_reach_three_workers_with_one_digest() {
    let ws = workers(3).await;
    let t = table(10_000);
    let Frame::Broadcast { digest: sent, .. } = broadcast_frame(&t) else {
        unreachable!()
    };
    let acks = distribute_broadcast(&t, &targets(&ws), deadline()).await.unwrap();
    assert_eq!(acks.iter().map(|a| a.worker_id).collect::<Vec<_>>(), [0, 1, 2]);
    for ack in &acks {
        assert_eq!(hex(&ack.digest), hex(&sent));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn empty_table_is_acknowledged() {
    let ws = workers(2).await;
    let acks = distribute_broadcast(&table(0), &targets(&ws), deadline()).await.unwrap();
    assert_eq!(acks.len(), 2);
    assert_eq!(acks[0].digest, acks[1].digest);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn dead_worker_is_named() {
    let ws = workers(1).await;
    let mut to = targets(&ws);
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    to.push((5, dead.to_string()));
    let err = distribute_broadcast(&table(10), &to, Instant::now() + Duration::from_millis(500))
        .await
        .unwrap_err();
    assert_eq!(err.worker, 5);
    assert_eq!(err.table, "prices");
}
