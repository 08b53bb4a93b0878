use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowserve_cli::bench::{self, BenchConfig, BenchError};
use flowserve_cli::lime_batch::{self, ImageOptions, LimeJob};
use flowserve_cli::{EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};
use flowserve_core::http_client::mock::{MockScript, MockServer};
use flowserve_core::pipeline::parse_pipeline;
use flowserve_core::row::{hash_partition, key_bytes, Value};
use flowserve_runtime::client::{ClientError, DriverClient};
use flowserve_runtime::driver::start_driver;
use flowserve_runtime::monitor::DEFAULT_HEARTBEAT_MS;
use flowserve_runtime::serving::{ServingConfig, ServingMode};
use flowserve_runtime::worker::{start_worker, WorkerConfig, DEFAULT_DRAIN_GRACE_MS};
use flowserve_runtime::SystemClock;

#[derive(Parser)]
#[command(name = "flowserve", version, about = "Dataflow pipelines served as web services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the control plane.
    Driver {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        #[arg(long, env = "RS_HEARTBEAT_MS", default_value_t = DEFAULT_HEARTBEAT_MS)]
        heartbeat_ms: u64,
    },
    /// Run a worker and register it with the driver.
    Worker(WorkerArgs),
    /// Submit a pipeline document.
    Submit {
        #[command(flatten)]
        driver: DriverArg,
        pipeline: PathBuf,
    },
    /// Submit a pipeline and start serving it on every live worker.
    Serve(ServeArgs),
    /// Measure request latency against a serving endpoint.
    Bench(BenchArgs),
    /// Explain tabular instances (CSV) or PPM images (directory) in batch.
    Lime(LimeArgs),
    /// Serve a scripted HTTP endpoint for testing clients.
    MockServer {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: SocketAddr,
    },
    /// Print the partition of each string key.
    Hash {
        #[arg(long)]
        partitions: usize,
        keys: Vec<String>,
    },
}

#[derive(Args)]
struct DriverArg {
    #[arg(long, env = "RS_DRIVER_ADDR", default_value = "127.0.0.1:7070")]
    driver: String,
}

#[derive(Args)]
struct WorkerArgs {
    #[command(flatten)]
    driver: DriverArg,
    #[arg(long, default_value = "127.0.0.1:0")]
    public: String,
    #[arg(long, default_value = "127.0.0.1:0")]
    internal: String,
    #[arg(long, env = "RS_HEARTBEAT_MS", default_value_t = DEFAULT_HEARTBEAT_MS)]
    heartbeat_ms: u64,
    #[arg(long, default_value_t = DEFAULT_DRAIN_GRACE_MS)]
    drain_grace_ms: u64,
    /// Probability of dropping each outgoing internal response frame.
    #[arg(long, env = "RS_FAULT_DROP_RESPONSE_FRAMES", default_value_t = 0.0)]
    drop_response_frames: f64,
    #[arg(long, env = "RS_FAULT_SEED", default_value_t = 0)]
    fault_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Continuous,
    Minibatch,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    driver: DriverArg,
    #[arg(long, value_enum, default_value = "continuous")]
    mode: Mode,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 64)]
    max_batch_size: usize,
    #[arg(long, default_value_t = 10)]
    max_batch_delay_ms: u64,
    #[arg(long, default_value_t = 204)]
    filtered_status: u16,
    #[arg(long, default_value = "/")]
    route_prefix: String,
    #[arg(long, default_value = "response")]
    reply_column: String,
    pipeline: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    url: String,
    #[arg(long, default_value = "hello")]
    body: String,
    /// Read the request body from a file instead.
    #[arg(long)]
    body_file: Option<PathBuf>,
    #[arg(long, default_value = "POST")]
    method: String,
    #[arg(long = "header", value_parser = parse_header)]
    headers: Vec<(String, String)>,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = bench::DEFAULT_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = bench::DEFAULT_CONCURRENCY)]
    concurrency: usize,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct LimeArgs {
    #[arg(long)]
    pipeline: PathBuf,
    /// A CSV of feature rows, or a directory of .ppm images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    cell_width: usize,
    #[arg(long, default_value_t = 8)]
    cell_height: usize,
    #[arg(long, value_parser = parse_color, default_value = "128,128,128")]
    neutral: [u8; 3],
}

fn parse_header(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once(':').ok_or("expected NAME:VALUE")?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_color(s: &str) -> Result<[u8; 3], String> {
    let parts: Vec<u8> = s
        .split(',')
        .map(|p| p.trim().parse::<u8>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected R,G,B".to_string())
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn validation(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e.status() {
            Some(s) if (400..500).contains(&s) && s != 404 => Failure::validation(e),
            _ => Failure::runtime(e),
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn announce(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn read_pipeline(path: &Path) -> Result<(String, PathBuf), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    parse_pipeline(&text).map_err(Failure::validation)?;
    let base = std::fs::canonicalize(path)
        .ok()
        .and_then(|p| p.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((text, base))
}

async fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Driver { listen, heartbeat_ms } => {
            let driver = start_driver(&listen, Arc::new(SystemClock), heartbeat_ms)
                .await
                .map_err(|e| Failure::runtime(format!("cannot listen on {listen}: {e}")))?;
            announce(format!("driver listening on {}", driver.addr()));
            shutdown_signal().await;
            driver.shutdown().await;
            Ok(())
        }
        Command::Worker(args) => {
            if !(0.0..=1.0).contains(&args.drop_response_frames) {
                return Err(Failure::validation("drop probability must be within [0, 1]"));
            }
            let config = WorkerConfig {
                driver: Some(args.driver.driver),
                public_bind: args.public,
                internal_bind: args.internal,
                heartbeat_ms: args.heartbeat_ms,
                drain_grace_ms: args.drain_grace_ms,
                drop_response_frames: args.drop_response_frames,
                fault_seed: args.fault_seed,
                ..WorkerConfig::default()
            };
            let worker = start_worker(config).await.map_err(Failure::runtime)?;
            announce(format!(
                "worker {} public {} internal {}",
                worker.id(),
                worker.public_addr(),
                worker.internal_addr()
            ));
            shutdown_signal().await;
            let cut = worker.drain().await;
            if cut > 0 {
                tracing::warn!(requests = cut, "answered with 503 at shutdown");
            }
            Ok(())
        }
        Command::Submit { driver, pipeline } => {
            let (text, base) = read_pipeline(&pipeline)?;
            let status = DriverClient::new(&driver.driver).submit(&text, Some(&base)).await?;
            print_json(&status);
            Ok(())
        }
        Command::Serve(args) => {
            let (text, base) = read_pipeline(&args.pipeline)?;
            let config = ServingConfig {
                mode: match args.mode {
                    Mode::Continuous => ServingMode::Continuous,
                    Mode::Minibatch => ServingMode::Minibatch,
                },
                max_batch_size: args.max_batch_size,
                max_batch_delay_ms: args.max_batch_delay_ms,
                request_timeout_ms: args.timeout_ms,
                reply_column: args.reply_column,
                filtered_status: args.filtered_status,
                route_prefix: args.route_prefix,
            };
            let client = DriverClient::new(&args.driver.driver);
            let submitted = client.submit(&text, Some(&base)).await?;
            let status = client.serve(&submitted.id, &config).await?;
            print_json(&status);
            Ok(())
        }
        Command::Bench(args) => {
            let body = match &args.body_file {
                Some(path) => std::fs::read(path).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?,
                None => args.body.into_bytes(),
            };
            let config = BenchConfig {
                method: args.method,
                headers: args.headers,
                warmup: args.warmup,
                iters: args.iters,
                concurrency: args.concurrency,
                timeout_ms: args.timeout_ms,
                ..BenchConfig::new(args.url, body)
            };
            let (report, samples) = bench::run_bench(&config).await.map_err(|e| match e {
                BenchError::Config(_) => Failure::validation(e),
                _ => Failure::runtime(e),
            })?;
            bench::write_outputs(&args.out, &report, &samples).map_err(Failure::runtime)?;
            print!("{}", bench::render_table(&report));
            Ok(())
        }
        Command::Lime(args) => {
            let job = LimeJob::load(&args.pipeline).map_err(|e| Failure {
                code: e.exit_code(),
                message: e.to_string(),
            })?;
            let input = args.input.clone();
            let options = ImageOptions {
                cell_w: args.cell_width,
                cell_h: args.cell_height,
                neutral: args.neutral,
            };
            let rows = tokio::task::spawn_blocking(move || {
                if input.is_dir() {
                    job.explain_images(&input, &options)
                } else {
                    job.explain_csv(&input)
                }
            })
            .await
            .map_err(Failure::runtime)?
            .map_err(|e| Failure {
                code: e.exit_code(),
                message: e.to_string(),
            })?;
            lime_batch::write_csv(&args.out, &rows).map_err(Failure::runtime)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("explained {} instances ({failed} failed) -> {}", rows.len(), args.out.display());
            Ok(())
        }
        Command::MockServer { script, listen } => {
            let text = std::fs::read_to_string(&script)
                .map_err(|e| Failure::validation(format!("{}: {e}", script.display())))?;
            let script = MockScript::from_yaml(&text).map_err(Failure::validation)?;
            let server = MockServer::start(script, listen).await.map_err(Failure::runtime)?;
            announce(format!("mock listening on {}", server.addr()));
            shutdown_signal().await;
            Ok(())
        }
        Command::Hash { partitions, keys } => {
            if partitions == 0 {
                return Err(Failure::validation("partitions must be positive"));
            }
            for key in keys {
                let value = Value::from(key.clone());
                println!("{key}\t{}", hash_partition(&key_bytes([&value]), partitions));
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    let code = match runtime.block_on(run(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    };
    drop(runtime);
    std::process::exit(code);
}
