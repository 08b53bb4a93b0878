//! Pipeline documents, schema propagation, the expression language and the
//! single-process batch runner whose output defines the expected result of
//! every other execution mode.

mod batch;
mod exec;
mod expr;
mod parse;
mod plan;
mod spec;
mod tables;

use thiserror::Error;

pub use batch::run_batch;
pub use exec::{score_linear, CompiledPipeline};
pub use expr::{eval_expr, CompiledExpr};
pub use parse::{parse_pipeline, validate_spec};
pub use plan::{propagate_schema, propagate_schema_mode, stage_schemas};
pub use spec::{
    classify_stage, AggFn, AggSpec, ArithOp, CmpOp, Expr, FuncName, JoinKind, Link, Literal,
    ParamBinding, PipelineSpec, StageClass, StageSpec, TableDecl, FORMAT_VERSION,
};
pub use tables::{load_tables, BroadcastTable, Catalog};

/// Execution context of a pipeline. The only semantic difference is
/// `Aggregate`: batch mode emits one row per group, serving mode joins each
/// group's result back onto every input row of the processing batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Batch,
    Serving,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid pipeline at {path}: {message}")]
    Semantic { path: String, message: String },
    #[error("stage {stage}: {message}")]
    Schema { stage: usize, message: String },
    #[error("input row {row}: {message}")]
    Input { row: usize, message: String },
    #[error("table {table}: {message}")]
    Table { table: String, message: String },
    #[error("stage {stage} failed: {message}")]
    Exec { stage: usize, message: String },
}

impl PipelineError {
    pub(crate) fn schema(stage: usize, message: impl Into<String>) -> Self {
        PipelineError::Schema {
            stage,
            message: message.into(),
        }
    }

    pub(crate) fn exec(stage: usize, message: impl Into<String>) -> Self {
        PipelineError::Exec {
            stage,
            message: message.into(),
        }
    }
}
