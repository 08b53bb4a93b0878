use std::collections::BTreeSet;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("attempt {attempt} outside 1..={max_retries}")]
    AttemptOutOfRange { attempt: u32, max_retries: u32 },
    #[error("invalid retry policy: {0}")]
    Invalid(String),
}

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub base_delay_ms: f64,
    pub multiplier: f64,
    pub max_retries: u32,
    pub retryable_statuses: BTreeSet<u16>,
    pub retry_transport_errors: bool,
    pub jitter_fraction: f64,
    /// Fixes the jitter draws; unset means an OS-seeded generator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay_ms: 100.0,
            multiplier: 2.0,
            max_retries: 3,
            retryable_statuses: [429, 500, 502, 503, 504].into_iter().collect(),
            retry_transport_errors: true,
            jitter_fraction: 0.1,
            seed: None,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.base_delay_ms > 0.0 && self.base_delay_ms.is_finite()) {
            return Err(PolicyError::Invalid("baseDelayMs must be positive".into()));
        }
        if !(self.multiplier >= 1.0 && self.multiplier.is_finite()) {
            return Err(PolicyError::Invalid("multiplier must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err(PolicyError::Invalid("jitterFraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn is_retryable(&self, status: u16) -> bool {
        self.retryable_statuses.contains(&status)
    }

    /// Delay before retry `attempt` (1-based) given a uniform draw in [0, 1).
    /// The draw maps linearly onto the factor range [1 - jitter, 1 + jitter].
    pub fn delay_ms(&self, attempt: u32, unit_draw: f64) -> Result<f64, PolicyError> {
        if attempt == 0 || attempt > self.max_retries {
            return Err(PolicyError::AttemptOutOfRange {
                attempt,
                max_retries: self.max_retries,
            });
        }
        let nominal = self.base_delay_ms * self.multiplier.powi(attempt as i32 - 1);
        let factor = 1.0 - self.jitter_fraction + 2.0 * self.jitter_fraction * unit_draw;
        Ok(nominal * factor)
    }

    /// The whole jitter-free schedule; its length is `max_retries`.
    pub fn nominal_schedule(&self) -> Vec<f64> {
        (1..=self.max_retries)
            .map(|a| self.delay_ms(a, 0.5).expect("in range"))
            .collect()
    }
}

pub fn backoff_schedule<R: Rng + ?Sized>(
    policy: &RetryPolicy,
    attempt: u32,
    rng: &mut R,
) -> Result<Duration, PolicyError> {
    let ms = policy.delay_ms(attempt, rng.random::<f64>())?;
    Ok(Duration::from_secs_f64(ms / 1000.0))
}
