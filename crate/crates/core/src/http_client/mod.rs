//! HTTP client stage: builds requests from rows through literal or column
//! bindings, then executes a partition's requests with bounded concurrency,
//! a token-bucket throttle and exponential backoff.

mod bucket;
mod execute;
pub mod mock;
mod policy;
mod template;

pub use bucket::{Throttle, TokenBucket};
pub use execute::{block_on_io, execute_partition, CallError, CallOutcome, ClientConfig, HttpClient};
pub use policy::{backoff_schedule, PolicyError, RetryPolicy};
pub use template::{build_request, CompiledTemplate, HeaderBinding, RequestTemplate};
