//! Driver and worker processes for serving pipelines across a cluster:
//! membership and liveness, the framed internal transport, shuffle and
//! broadcast, and the web-serving layer that turns requests into rows and
//! routes replies back to their open connections.

pub mod broadcast;
pub mod client;
pub mod clock;
pub mod cluster;
pub mod driver;
pub mod exchange;
pub mod frame;
pub mod monitor;
pub mod serving;
pub mod transport;
pub mod worker;

pub use clock::{Clock, MockClock, SystemClock};
