use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::pin::Pin;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::io::BufReader;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{watch, Mutex};
use tokio::time::Instant;

use crate::frame::{read_frame, write_frame, Frame, FrameError};

const FIRST_BACKOFF: Duration = Duration::from_millis(10);
const MAX_BACKOFF: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("worker {worker} at {addr} unreachable after {attempts} attempts: {message}")]
    Unreachable {
        worker: u32,
        addr: String,
        attempts: u32,
        message: String,
    },
    #[error("no address known for worker {0}")]
    UnknownPeer(u32),
    #[error("worker {worker} at {addr} sent no reply: {message}")]
    NoReply {
        worker: u32,
        addr: String,
        message: String,
    },
}

impl TransportError {
    pub fn worker(&self) -> u32 {
        match self {
            TransportError::Unreachable { worker, .. }
            | TransportError::NoReply { worker, .. }
            | TransportError::UnknownPeer(worker) => *worker,
        }
    }
}

async fn connect(addr: &str) -> std::io::Result<TcpStream> {
    let stream = TcpStream::connect(addr).await?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

struct Link {
    addr: String,
    stream: Mutex<Option<TcpStream>>,
}

/// Persistent outbound connections to peer workers. Each peer has one
/// connection; concurrent senders queue on it so frames never interleave.
pub struct Peers {
    links: HashMap<u32, Link>,
}

impl Peers {
    pub fn new(addrs: impl IntoIterator<Item = (u32, String)>) -> Self {
        Self {
            links: addrs
                .into_iter()
                .map(|(id, addr)| {
                    (
                        id,
                        Link {
                            addr,
                            stream: Mutex::new(None),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn addr(&self, worker: u32) -> Option<&str> {
        self.links.get(&worker).map(|l| l.addr.as_str())
    }

    /// Writes `frame` to `worker`, reconnecting with backoff until `deadline`.
    pub async fn send(&self, worker: u32, frame: &Frame, deadline: Instant) -> Result<(), TransportError> {
        let link = self
            .links
            .get(&worker)
            .ok_or(TransportError::UnknownPeer(worker))?;
        let bytes = frame.encode();
        let mut guard = link.stream.lock().await;
        let mut backoff = FIRST_BACKOFF;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let result = async {
                if guard.is_none() {
                    *guard = Some(connect(&link.addr).await?);
                }
                use tokio::io::AsyncWriteExt;
                let stream = guard.as_mut().expect("connected above");
                stream.write_all(&bytes).await
            }
            .await;
            match result {
                Ok(()) => return Ok(()),
                Err(e) => {
                    *guard = None;
                    let now = Instant::now();
                    if now + backoff > deadline {
                        return Err(TransportError::Unreachable {
                            worker,
                            addr: link.addr.clone(),
                            attempts,
                            message: e.to_string(),
                        });
                    }
                    tokio::time::sleep(backoff).await;
                    backoff = (backoff * 2).min(MAX_BACKOFF);
                }
            }
        }
    }
}

/// Sends one frame on a fresh connection and waits for the single reply
/// frame, retrying the connect until `deadline`.
pub async fn request(worker: u32, addr: &str, frame: &Frame, deadline: Instant) -> Result<Frame, TransportError> {
    let mut backoff = FIRST_BACKOFF;
    let mut attempts = 0;
    let mut stream = loop {
        attempts += 1;
        match connect(addr).await {
            Ok(s) => break s,
            Err(e) => {
                if Instant::now() + backoff > deadline {
                    return Err(TransportError::Unreachable {
                        worker,
                        addr: addr.to_string(),
                        attempts,
                        message: e.to_string(),
                    });
                }
                tokio::time::sleep(backoff).await;
                backoff = (backoff * 2).min(MAX_BACKOFF);
            }
        }
    };
    let no_reply = |message: String| TransportError::NoReply {
        worker,
        addr: addr.to_string(),
        message,
    };
    let exchange = async {
        write_frame(&mut stream, frame)
            .await
            .map_err(|e| no_reply(e.to_string()))?;
        match read_frame(&mut stream).await {
            Ok(Some(reply)) => Ok(reply),
            Ok(None) => Err(no_reply("connection closed".into())),
            Err(e) => Err(no_reply(e.to_string())),
        }
    };
    match tokio::time::timeout_at(deadline, exchange).await {
        Ok(result) => result,
        Err(_) => Err(no_reply("deadline passed".into())),
    }
}

pub type HandlerFuture<'a> = Pin<Box<dyn Future<Output = Option<Frame>> + Send + 'a>>;

/// Receives frames from the internal service; a returned frame is written
/// back on the same connection.
pub trait FrameHandler: Send + Sync + 'static {
    fn handle(&self, frame: Frame) -> HandlerFuture<'_>;

    fn protocol_error(&self, peer: SocketAddr, error: &FrameError) {
        tracing::warn!(%peer, %error, "dropping connection after protocol error");
    }
}

/// Accepts internal connections until the returned sender is dropped or
/// set to `true`.
pub fn serve_frames<H: FrameHandler>(listener: TcpListener, handler: Arc<H>) -> watch::Sender<bool> {
    let (stop_tx, mut stop) = watch::channel(false);
    tokio::spawn(async move {
        loop {
            tokio::select! {
                _ = stop.changed() => break,
                accepted = listener.accept() => {
                    let Ok((stream, peer)) = accepted else { continue };
                    let _ = stream.set_nodelay(true);
                    let handler = handler.clone();
                    let mut stop = stop.clone();
                    tokio::spawn(async move {
                        let (read, mut write) = stream.into_split();
                        let mut read = BufReader::new(read);
                        loop {
                            let frame = tokio::select! {
                                _ = stop.changed() => break,
                                f = read_frame(&mut read) => f,
                            };
                            match frame {
                                Ok(Some(frame)) => {
                                    if let Some(reply) = handler.handle(frame).await {
                                        if write_frame(&mut write, &reply).await.is_err() {
                                            break;
                                        }
                                    }
                                }
                                Ok(None) => break,
                                Err(e) => {
                                    handler.protocol_error(peer, &e);
                                    break;
                                }
                            }
                        }
                    });
                }
            }
        }
    });
    stop_tx
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowserve_core::row::{HttpResponseData, RoutingId};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Echo(AtomicUsize);

    impl FrameHandler for Echo {
        fn handle(&self, frame: Frame) -> HandlerFuture<'_> {
            Box::pin(async move {
                self.0.fetch_add(1, Ordering::SeqCst);
                match frame {
                    Frame::Deploy { correlation, .. } => Some(Frame::Ack {
                        correlation,
                        ok: true,
                        digest: [0; 32],
                        message: String::new(),
                    }),
                    _ => None,
                }
            })
        }
    }

    #[tokio::test]
    async fn request_gets_ack_and_sends_are_delivered() {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let handler = Arc::new(Echo(AtomicUsize::new(0)));
        let _stop = serve_frames(listener, handler.clone());
        let deadline = Instant::now() + Duration::from_secs(2);
        let reply = request(0, &addr, &Frame::Deploy { correlation: 4, document: vec![] }, deadline)
            .await
            .unwrap();
        assert!(matches!(reply, Frame::Ack { correlation: 4, ok: true, .. }));
        let peers = Peers::new([(0, addr)]);
        for seq in 0..10 {
            let frame = Frame::Response {
                id: RoutingId::new(0, seq),
                response: HttpResponseData::empty(200),
            };
            peers.send(0, &frame, deadline).await.unwrap();
        }
        for _ in 0..100 {
            if handler.0.load(Ordering::SeqCst) == 11 {
                return;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("frames not delivered: {}", handler.0.load(Ordering::SeqCst));
    }

    #[tokio::test]
    async fn unreachable_peer_is_named_after_deadline() {
        // Bind then drop to get a port nobody listens on.
        let addr = TcpListener::bind("127.0.0.1:0")
            .await
            .unwrap()
            .local_addr()
            .unwrap()
            .to_string();
        let peers = Peers::new([(5, addr.clone())]);
        let start = Instant::now();
        let deadline = start + Duration::from_millis(150);
        let frame = Frame::Deploy {
            correlation: 0,
            document: vec![],
        };
        let err = peers.send(5, &frame, deadline).await.unwrap_err();
        assert_eq!(err.worker(), 5);
        assert!(err.to_string().contains(&addr), "{err}");
        assert!(start.elapsed() <= Duration::from_millis(400));
        assert!(matches!(err, TransportError::Unreachable { attempts, .. } if attempts > 1));
    }
}
