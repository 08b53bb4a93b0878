//! A driver and N workers inside one process, on ephemeral loopback ports.
//! Used by tests and the benchmark's in-process mode.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use crate::client::{ClientError, DriverClient};
use crate::clock::SystemClock;
use crate::driver::{start_driver, DriverHandle, PipelineStatus};
use crate::monitor::WorkerState;
use crate::serving::{MetricsSnapshot, ServingConfig};
use crate::worker::{start_worker, WorkerConfig, WorkerHandle};

pub struct LocalCluster {
    driver: DriverHandle,
    client: DriverClient,
    workers: Vec<WorkerHandle>,
}

#[derive(Debug, Clone)]
pub struct ClusterOptions {
    pub workers: usize,
    pub heartbeat_ms: u64,
    pub drop_response_frames: f64,
    pub fault_seed: u64,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            workers: 2,
            heartbeat_ms: 200,
            drop_response_frames: 0.0,
            fault_seed: 7,
        }
    }
}

impl LocalCluster {
    pub async fn start(workers: usize) -> Result<Self, String> {
        Self::start_with(ClusterOptions {
            workers,
            ..ClusterOptions::default()
        })
        .await
    }

    pub async fn start_with(options: ClusterOptions) -> Result<Self, String> {
        let driver = start_driver("127.0.0.1:0", Arc::new(SystemClock), options.heartbeat_ms)
            .await
            .map_err(|e| format!("driver: {e}"))?;
        let addr = driver.addr().to_string();
        let mut handles = Vec::new();
        for i in 0..options.workers {
            let config = WorkerConfig {
                driver: Some(addr.clone()),
                heartbeat_ms: options.heartbeat_ms,
                drain_grace_ms: 1000,
                drop_response_frames: options.drop_response_frames,
                fault_seed: options.fault_seed.wrapping_add(i as u64),
                ..WorkerConfig::default()
            };
            handles.push(start_worker(config).await?);
        }
        let cluster = Self {
            client: DriverClient::new(&addr),
            driver,
            workers: handles,
        };
        cluster.wait_for_workers(options.workers).await?;
        Ok(cluster)
    }

    async fn wait_for_workers(&self, n: usize) -> Result<(), String> {
        let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
        loop {
            let workers = self.client.list_workers().await.map_err(|e| e.to_string())?;
            if workers.iter().filter(|w| w.state == WorkerState::Serving).count() >= n {
                return Ok(());
            }
            if tokio::time::Instant::now() > deadline {
                return Err(format!("only {} of {n} workers came up", workers.len()));
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    pub fn driver_addr(&self) -> String {
        self.driver.addr().to_string()
    }

    pub fn client(&self) -> &DriverClient {
        &self.client
    }

    pub fn workers(&self) -> &[WorkerHandle] {
        &self.workers
    }

    /// Base URLs of every worker's public listener, in worker id order.
    pub fn urls(&self) -> Vec<String> {
        let mut workers: Vec<&WorkerHandle> = self.workers.iter().collect();
        workers.sort_by_key(|w| w.id());
        workers.iter().map(|w| format!("http://{}", w.public_addr())).collect()
    }

    pub async fn submit(&self, document: &str, base_dir: Option<&Path>) -> Result<PipelineStatus, ClientError> {
        self.client.submit(document, base_dir).await
    }

    pub async fn serve(&self, pipeline_id: &str, config: &ServingConfig) -> Result<PipelineStatus, ClientError> {
        self.client.serve(pipeline_id, config).await
    }

    /// Submits and serves in one step.
    pub async fn deploy(
        &self,
        document: &str,
        base_dir: Option<&Path>,
        config: &ServingConfig,
    ) -> Result<PipelineStatus, ClientError> {
        let status = self.submit(document, base_dir).await?;
        self.serve(&status.id, config).await
    }

    pub fn metrics(&self) -> Vec<MetricsSnapshot> {
        self.workers.iter().map(|w| w.metrics()).collect()
    }

    pub fn total_metrics(&self) -> MetricsSnapshot {
        self.metrics().into_iter().sum()
    }

    /// Drains every worker, then stops the driver.
    pub async fn shutdown(self) {
        for worker in self.workers {
            worker.drain().await;
        }
        self.driver.shutdown().await;
    }
}
