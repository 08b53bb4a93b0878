//! Web-serving layer: request registry, batch scheduling and the reply sink.

mod batcher;
mod metrics;
mod registry;
mod sink;

pub use batcher::Batcher;
pub use metrics::{Metrics, MetricsSnapshot};
pub use registry::{Completion, Registry, RegistryCounters, DEFAULT_SHARDS};
pub use sink::{settle, Settlement};

use flowserve_core::pipeline::{CompiledPipeline, PipelineSpec, StageClass};
use flowserve_core::row::DataType;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServingMode {
    Continuous,
    Minibatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct ServingConfig {
    pub mode: ServingMode,
    pub max_batch_size: usize,
    pub max_batch_delay_ms: u64,
    pub request_timeout_ms: u64,
    pub reply_column: String,
    pub filtered_status: u16,
    pub route_prefix: String,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self {
            mode: ServingMode::Continuous,
            max_batch_size: 64,
            max_batch_delay_ms: 10,
            request_timeout_ms: 30_000,
            reply_column: "response".into(),
            filtered_status: 204,
            route_prefix: "/".into(),
        }
    }
}

/// Column positions the serving layer needs, resolved once at deploy time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServingPlan {
    pub id_col: String,
    /// Input positions of the routing id and request columns.
    pub input_id: usize,
    pub input_request: usize,
    /// Output positions of the routing id and reply columns.
    pub output_id: usize,
    pub output_reply: usize,
    /// Indices of wide stages in pipeline order.
    pub wide_stages: Vec<usize>,
}

/// Checks that `spec` can be served under `config`. Nothing is started, so
/// a failure here means no socket is ever opened for the pipeline.
pub fn plan_serving(spec: &PipelineSpec, config: &ServingConfig) -> Result<ServingPlan, String> {
    if config.max_batch_size == 0 {
        return Err("maxBatchSize must be positive".into());
    }
    if config.request_timeout_ms == 0 {
        return Err("requestTimeoutMs must be positive".into());
    }
    if !(100..=599).contains(&config.filtered_status) {
        return Err(format!("filteredStatus {} is not an HTTP status", config.filtered_status));
    }
    if !config.route_prefix.starts_with('/') {
        return Err(format!("routePrefix {:?} must start with '/'", config.route_prefix));
    }
    if config.mode == ServingMode::Continuous && !spec.is_all_narrow() {
        let wide = spec
            .stages
            .iter()
            .position(|s| s.classify() == StageClass::Wide)
            .unwrap_or(0);
        return Err(format!(
            "continuous mode needs an all-narrow pipeline, but stage {wide} ({}) is wide",
            spec.stages[wide].kind()
        ));
    }
    let input = &spec.input_schema;
    if input.len() != 2 {
        return Err("serving input schema must be exactly (routingId, httpRequest)".into());
    }
    let find = |ty: DataType| input.fields().iter().position(|f| f.data_type == ty);
    let (Some(input_id), Some(input_request)) = (find(DataType::RoutingId), find(DataType::HttpRequest)) else {
        return Err("serving input schema must be exactly (routingId, httpRequest)".into());
    };
    let id_col = input.fields()[input_id].name.clone();
    let compiled = CompiledPipeline::new(spec, flowserve_core::pipeline::ExecMode::Serving, &unchecked_tables(spec))
        .map_err(|e| e.to_string())?;
    for i in 1..=compiled.stage_count() {
        let schema = compiled.schema_before(i);
        match schema.field(&id_col) {
            Some(f) if f.data_type == DataType::RoutingId => {}
            _ => {
                return Err(format!(
                    "stage {} drops the routing id column {id_col:?}; replies could not be routed",
                    i - 1
                ))
            }
        }
    }
    let output = compiled.output_schema();
    let output_id = output.index_of(&id_col).expect("checked per stage");
    let output_reply = match output.field(&config.reply_column) {
        Some(f) if f.data_type == DataType::HttpResponse => output.index_of(&config.reply_column).unwrap(),
        Some(f) => {
            return Err(format!(
                "reply column {:?} has type {}, expected httpResponse",
                config.reply_column, f.data_type
            ))
        }
        None => return Err(format!("output has no reply column {:?}", config.reply_column)),
    };
    let wide_stages = spec
        .stages
        .iter()
        .enumerate()
        .filter(|(_, s)| s.classify() == StageClass::Wide)
        .map(|(i, _)| i)
        .collect();
    Ok(ServingPlan {
        id_col,
        input_id,
        input_request,
        output_id,
        output_reply,
        wide_stages,
    })
}

// Schema checks only need declared table schemas, so empty stand-ins are
// enough here; real rows arrive by broadcast.
fn unchecked_tables(spec: &PipelineSpec) -> flowserve_core::pipeline::Catalog {
    spec.tables
        .iter()
        .map(|t| {
            let table = flowserve_core::pipeline::BroadcastTable::new(&t.id, t.schema.clone(), Vec::new())
                .expect("empty tables are valid");
            (t.id.clone(), std::sync::Arc::new(table))
        })
        .collect()
}
