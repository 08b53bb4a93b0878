//! Dataflow core: the row model, pipeline descriptions and the reference
//! batch runner, the resilient HTTP client stage, and LIME explanations.

pub mod http_client;
pub mod lime;
pub mod pipeline;
pub mod row;
