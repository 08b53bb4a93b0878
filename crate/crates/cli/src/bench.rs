//! Closed-loop latency benchmark against one serving endpoint.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use flowserve_core::http_client::{ClientConfig, HttpClient};
use flowserve_core::row::HttpRequestData;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_WARMUP: usize = 200;
pub const DEFAULT_ITERS: usize = 2000;
pub const DEFAULT_CONCURRENCY: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub url: String,
    pub method: String,
    pub body: Vec<u8>,
    pub headers: Vec<(String, String)>,
    pub warmup: usize,
    pub iters: usize,
    pub concurrency: usize,
    pub timeout_ms: u64,
}

impl BenchConfig {
    pub fn new(url: impl Into<String>, body: impl Into<Vec<u8>>) -> Self {
        Self {
            url: url.into(),
            method: "POST".into(),
            body: body.into(),
            headers: Vec::new(),
            warmup: DEFAULT_WARMUP,
            iters: DEFAULT_ITERS,
            concurrency: DEFAULT_CONCURRENCY,
            timeout_ms: 30_000,
        }
    }
}

/// One measured request. `status` is 0 for a transport failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub latency_ms: f64,
    pub status: u16,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyReport {
    pub target: String,
    pub warmup_count: usize,
    pub measure_count: usize,
    pub concurrency: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub errors: usize,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark settings: {0}")]
    Config(String),
    #[error("target {url} is unreachable: {message}")]
    Unreachable { url: String, message: String },
    #[error("all {0} measured requests failed")]
    AllFailed(usize),
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(config: &BenchConfig, samples: &[Sample]) -> Result<LatencyReport, BenchError> {
    let mut ok: Vec<f64> = samples.iter().filter(|s| s.ok).map(|s| s.latency_ms).collect();
    if ok.is_empty() {
        return Err(BenchError::AllFailed(samples.len()));
    }
    ok.sort_by(f64::total_cmp);
    let (mean_ms, std_ms) = mean_std(&ok);
    Ok(LatencyReport {
        target: config.url.clone(),
        warmup_count: config.warmup,
        measure_count: samples.len(),
        concurrency: config.concurrency,
        mean_ms,
        std_ms,
        p50_ms: percentile(&ok, 50.0),
        p95_ms: percentile(&ok, 95.0),
        p99_ms: percentile(&ok, 99.0),
        min_ms: ok[0],
        max_ms: ok[ok.len() - 1],
        errors: samples.len() - ok.len(),
    })
}

fn request(config: &BenchConfig) -> HttpRequestData {
    let mut req = HttpRequestData::new(config.method.as_str(), config.url.clone()).with_body(config.body.clone());
    for (k, v) in &config.headers {
        req = req.with_header(k.as_str(), v.as_str());
    }
    req
}

/// Issues `warmup` unmeasured requests, then `iters` measured ones, with
/// `concurrency` request loops sharing one keep-alive connection pool.
/// Latency runs from issuing the request to reading the last body byte.
pub async fn run_bench(config: &BenchConfig) -> Result<(LatencyReport, Vec<Sample>), BenchError> {
    if config.iters == 0 {
        return Err(BenchError::Config("iters must be positive".into()));
    }
    if config.concurrency == 0 {
        return Err(BenchError::Config("concurrency must be positive".into()));
    }
    let http = HttpClient::new(ClientConfig {
        request_timeout_ms: config.timeout_ms,
        ..ClientConfig::default()
    });
    let req = Arc::new(request(config));
    // Fail fast with the transport message rather than 2000 errors.
    http.send(&req).await.map_err(|message| BenchError::Unreachable {
        url: config.url.clone(),
        message,
    })?;

    let run_phase = |total: usize, measured: bool| {
        let next = Arc::new(AtomicUsize::new(0));
        let mut tasks = Vec::new();
        for _ in 0..config.concurrency.min(total.max(1)) {
            let (http, req, next) = (http.clone(), req.clone(), next.clone());
            tasks.push(tokio::spawn(async move {
                let mut out = Vec::new();
                loop {
                    let index = next.fetch_add(1, Ordering::Relaxed);
                    if index >= total {
                        break;
                    }
                    let start = Instant::now();
                    let result = http.send(&req).await;
                    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
                    if measured {
                        let status = result.as_ref().map_or(0, |r| r.status);
                        out.push(Sample {
                            index,
                            latency_ms,
                            status,
                            ok: (200..300).contains(&status),
                        });
                    }
                }
                out
            }));
        }
        tasks
    };

    for task in run_phase(config.warmup, false) {
        task.await.expect("bench loop panicked");
    }
    let mut samples = Vec::with_capacity(config.iters);
    for task in run_phase(config.iters, true) {
        samples.extend(task.await.expect("bench loop panicked"));
    }
    samples.sort_by_key(|s| s.index);
    let report = summarize(config, &samples)?;
    Ok((report, samples))
}

/// `report.json` gives `report.csv` and `report.samples.csv`.
pub fn companion_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.with_extension("csv"), out.with_extension("samples.csv"))
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> BenchError {
    BenchError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_outputs(out: &Path, report: &LatencyReport, samples: &[Sample]) -> Result<(), BenchError> {
    let json = serde_json::to_string_pretty(report).expect("reports serialize");
    std::fs::write(out, json + "\n").map_err(|e| write_err(out, e))?;

    let (csv_path, samples_path) = companion_paths(out);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| write_err(&csv_path, e))?;
    w.serialize(report).map_err(|e| write_err(&csv_path, e))?;
    w.flush().map_err(|e| write_err(&csv_path, e))?;

    let mut w = csv::Writer::from_path(&samples_path).map_err(|e| write_err(&samples_path, e))?;
    for s in samples {
        w.serialize(s).map_err(|e| write_err(&samples_path, e))?;
    }
    w.flush().map_err(|e| write_err(&samples_path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>, BenchError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| write_err(path, e))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| write_err(path, e))
}

pub fn render_table(report: &LatencyReport) -> String {
    format!(
        "target       {}\n\
         warmup       {}\n\
         measured     {} (concurrency {})\n\
         errors       {}\n\
         mean ± std   {:.3} ± {:.3} ms\n\
         p50/p95/p99  {:.3} / {:.3} / {:.3} ms\n\
         min/max      {:.3} / {:.3} ms\n",
        report.target,
        report.warmup_count,
        report.measure_count,
        report.concurrency,
        report.errors,
        report.mean_ms,
        report.std_ms,
        report.p50_ms,
        report.p95_ms,
        report.p99_ms,
        report.min_ms,
        report.max_ms,
    )
}
