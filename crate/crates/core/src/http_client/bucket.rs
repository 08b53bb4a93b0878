use std::time::Duration;

use tokio::sync::Mutex;
use tokio::time::Instant;

/// Token bucket refilled continuously at `rate` tokens per second.
///
/// Burst capacity is a tenth of the rate (at least one token), so any
/// one-second window admits at most `1.1 * rate` acquisitions.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    tokens: f64,
    last_s: f64,
}

impl TokenBucket {
    pub fn new(rate_per_sec: f64) -> Self {
        assert!(rate_per_sec > 0.0, "rate must be positive");
        let capacity = (rate_per_sec * 0.1).max(1.0);
        Self {
            rate: rate_per_sec,
            capacity,
            tokens: capacity,
            last_s: 0.0,
        }
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    /// Takes a token at time `now_s` (seconds on any monotonic scale), or
    /// returns how long to wait before one is available.
    pub fn try_acquire(&mut self, now_s: f64) -> Result<(), Duration> {
        let elapsed = (now_s - self.last_s).max(0.0);
        self.tokens = (self.tokens + elapsed * self.rate).min(self.capacity);
        self.last_s = now_s;
        // Tolerance keeps refills that land a rounding error short of a
        // whole token from producing waits too small to advance a clock.
        if self.tokens >= 1.0 - 1e-9 {
            self.tokens = (self.tokens - 1.0).max(0.0);
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - self.tokens) / self.rate))
        }
    }
}

/// Async wrapper shared by the tasks of one partition.
pub struct Throttle {
    bucket: Option<Mutex<TokenBucket>>,
    origin: Instant,
}

impl Throttle {
    pub fn new(rate_per_sec: Option<f64>) -> Self {
        Self {
            bucket: rate_per_sec.map(|r| Mutex::new(TokenBucket::new(r))),
            origin: Instant::now(),
        }
    }

    pub async fn acquire(&self) {
        let Some(bucket) = &self.bucket else { return };
        loop {
            let wait = {
                let mut b = bucket.lock().await;
                match b.try_acquire(self.origin.elapsed().as_secs_f64()) {
                    Ok(()) => return,
                    Err(wait) => wait,
                }
            };
            tokio::time::sleep(wait).await;
        }
    }
}
