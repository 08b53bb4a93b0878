use std::collections::{BTreeSet, HashMap};

use super::expr::CompiledExpr;
use super::spec::{AggFn, JoinKind, Link, PipelineSpec, StageSpec};
use super::{ExecMode, PipelineError};
use crate::http_client::{ClientConfig, CompiledTemplate};
use crate::lime::LimeStageConfig;
use crate::row::{DataType, Field, Schema};

/// Where a stage writes a column: over an existing position or appended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Slot {
    Replace(usize),
    Append,
}

#[derive(Debug, Clone)]
pub(crate) struct AggPlan {
    pub func: AggFn,
    pub input: Option<usize>,
    pub out_type: DataType,
}

/// A stage with every column reference resolved against its input schema.
#[derive(Debug, Clone)]
pub(crate) enum StagePlan {
    Project {
        indices: Vec<usize>,
    },
    WithColumn {
        expr: CompiledExpr,
        slot: Slot,
    },
    Filter {
        expr: CompiledExpr,
    },
    StringIndex {
        input: usize,
        dictionary: HashMap<String, i64>,
        unknown: i64,
        slot: Slot,
    },
    OneHot {
        input: usize,
        cardinality: usize,
        slot: Slot,
    },
    LinearScore {
        weights: Vec<f64>,
        intercept: f64,
        inputs: Vec<usize>,
        link: Link,
        slot: Slot,
    },
    BroadcastJoin {
        table_id: String,
        left: usize,
        right: usize,
        join: JoinKind,
        right_width: usize,
    },
    Aggregate {
        keys: Vec<usize>,
        aggs: Vec<AggPlan>,
        mode: ExecMode,
    },
    Repartition {
        key: usize,
        n: usize,
    },
    HttpCall {
        template: Box<CompiledTemplate>,
        client: ClientConfig,
        response_slot: Slot,
        error_slot: Slot,
    },
    LimeExplain {
        input: usize,
        config: LimeStageConfig,
        target: Box<PipelineSpec>,
        score: usize,
        slot: Slot,
        error_slot: Slot,
    },
}

/// Static facts about columns that let later stages be checked early.
#[derive(Debug, Clone, Default)]
struct Facts {
    /// Exclusive upper bound of integer index columns.
    cardinality: HashMap<String, usize>,
    /// Fixed length of array columns.
    array_len: HashMap<String, usize>,
}

impl Facts {
    fn forget(&mut self, name: &str) {
        self.cardinality.remove(name);
        self.array_len.remove(name);
    }
}

fn place(schema: &Schema, name: &str, ty: DataType) -> (Schema, Slot) {
    let slot = match schema.index_of(name) {
        Some(i) => Slot::Replace(i),
        None => Slot::Append,
    };
    (schema.with_column(name, ty), slot)
}

fn column<'a>(
    schema: &'a Schema,
    stage: usize,
    name: &str,
    role: &str,
) -> Result<(usize, &'a DataType), PipelineError> {
    let index = schema
        .index_of(name)
        .ok_or_else(|| PipelineError::schema(stage, format!("{role} column {name:?} not found")))?;
    Ok((index, &schema.fields()[index].data_type))
}

fn require_type(
    stage: usize,
    name: &str,
    actual: &DataType,
    expected: &[DataType],
) -> Result<(), PipelineError> {
    if expected.contains(actual) {
        return Ok(());
    }
    let names: Vec<String> = expected.iter().map(|t| t.to_string()).collect();
    Err(PipelineError::schema(
        stage,
        format!("column {name:?} has type {actual}, expected {}", names.join(" or ")),
    ))
}

pub(crate) struct Planned {
    pub stages: Vec<StagePlan>,
    /// `schemas[i]` is the input of stage `i`; the last entry is the output.
    pub schemas: Vec<Schema>,
}

pub(crate) fn plan_pipeline(spec: &PipelineSpec, mode: ExecMode) -> Result<Planned, PipelineError> {
    let aggregates = spec
        .stages
        .iter()
        .filter(|s| matches!(s, StageSpec::Aggregate { .. }))
        .count();
    if aggregates > 1 {
        let second = spec
            .stages
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, StageSpec::Aggregate { .. }))
            .nth(1)
            .map(|(i, _)| i)
            .unwrap_or(0);
        return Err(PipelineError::schema(
            second,
            "at most one Aggregate stage is allowed per pipeline",
        ));
    }
    if spec.input_schema.is_empty() {
        return Err(PipelineError::Semantic {
            path: "inputSchema".into(),
            message: "input schema must not be empty".into(),
        });
    }
    let mut facts = Facts::default();
    let mut schema = spec.input_schema.clone();
    let mut stages = Vec::with_capacity(spec.stages.len());
    let mut schemas = vec![schema.clone()];
    for (i, stage) in spec.stages.iter().enumerate() {
        let (plan, next) = plan_stage(spec, i, stage, &schema, &mut facts, mode)?;
        stages.push(plan);
        schemas.push(next.clone());
        schema = next;
    }
    Ok(Planned { stages, schemas })
}

fn plan_stage(
    spec: &PipelineSpec,
    i: usize,
    stage: &StageSpec,
    schema: &Schema,
    facts: &mut Facts,
    mode: ExecMode,
) -> Result<(StagePlan, Schema), PipelineError> {
    use DataType as T;
    match stage {
        StageSpec::Project { columns } => {
            let mut indices = Vec::with_capacity(columns.len());
            let mut fields = Vec::with_capacity(columns.len());
            for name in columns {
                let (index, ty) = column(schema, i, name, "projected")?;
                if indices.contains(&index) {
                    return Err(PipelineError::schema(i, format!("column {name:?} projected twice")));
                }
                indices.push(index);
                fields.push(Field::new(name.clone(), ty.clone()));
            }
            let kept: BTreeSet<&String> = columns.iter().collect();
            facts.cardinality.retain(|k, _| kept.contains(k));
            facts.array_len.retain(|k, _| kept.contains(k));
            let out = Schema::new(fields).map_err(|e| PipelineError::schema(i, e.to_string()))?;
            Ok((StagePlan::Project { indices }, out))
        }
        StageSpec::WithColumn { name, expr } => {
            let compiled = CompiledExpr::compile(expr, schema)
                .map_err(|e| PipelineError::schema(i, format!("column {name:?}: {e}")))?;
            let (out, slot) = place(schema, name, compiled.data_type().clone());
            facts.forget(name);
            if let super::spec::Expr::Lit(lit) = expr {
                if let crate::row::Value::Array(items) = &lit.0 {
                    facts.array_len.insert(name.clone(), items.len());
                }
            }
            Ok((StagePlan::WithColumn { expr: compiled, slot }, out))
        }
        StageSpec::Filter { expr } => {
            let compiled = CompiledExpr::compile(expr, schema)
                .map_err(|e| PipelineError::schema(i, format!("filter: {e}")))?;
            if compiled.data_type() != &T::Bool {
                return Err(PipelineError::schema(
                    i,
                    format!("filter predicate has type {}, expected bool", compiled.data_type()),
                ));
            }
            Ok((StagePlan::Filter { expr: compiled }, schema.clone()))
        }
        StageSpec::StringIndex {
            in_col,
            out_col,
            dictionary,
        } => {
            let (input, ty) = column(schema, i, in_col, "input")?;
            require_type(i, in_col, ty, &[T::String])?;
            let n = dictionary.len();
            let mut seen = vec![false; n];
            for (key, &index) in dictionary {
                if index < 0 || index as usize >= n || std::mem::replace(&mut seen[index as usize], true) {
                    return Err(PipelineError::schema(
                        i,
                        format!(
                            "dictionary must map onto 0..{} without gaps; {key:?} -> {index}",
                            n.saturating_sub(1)
                        ),
                    ));
                }
            }
            let (out, slot) = place(schema, out_col, T::Int64);
            facts.forget(out_col);
            // Unseen strings take the extra slot at index n.
            facts.cardinality.insert(out_col.clone(), n + 1);
            let plan = StagePlan::StringIndex {
                input,
                dictionary: dictionary.iter().map(|(k, v)| (k.clone(), *v)).collect(),
                unknown: n as i64,
                slot,
            };
            Ok((plan, out))
        }
        StageSpec::OneHot {
            in_col,
            out_col,
            cardinality,
        } => {
            let (input, ty) = column(schema, i, in_col, "input")?;
            require_type(i, in_col, ty, &[T::Int64])?;
            if *cardinality == 0 {
                return Err(PipelineError::schema(i, "cardinality must be positive"));
            }
            if let Some(&known) = facts.cardinality.get(in_col) {
                if known > *cardinality {
                    return Err(PipelineError::schema(
                        i,
                        format!(
                            "column {in_col:?} holds indices below {known}, exceeding cardinality {cardinality}"
                        ),
                    ));
                }
            }
            let (out, slot) = place(schema, out_col, T::array(T::Float64));
            facts.forget(out_col);
            facts.array_len.insert(out_col.clone(), *cardinality);
            Ok((
                StagePlan::OneHot {
                    input,
                    cardinality: *cardinality,
                    slot,
                },
                out,
            ))
        }
        StageSpec::LinearScore {
            weights,
            intercept,
            in_cols,
            out_col,
            link,
        } => {
            if in_cols.is_empty() {
                return Err(PipelineError::schema(i, "LinearScore needs at least one input column"));
            }
            let mut inputs = Vec::with_capacity(in_cols.len());
            let mut width = Some(0usize);
            for name in in_cols {
                let (index, ty) = column(schema, i, name, "feature")?;
                require_type(i, name, ty, &[T::Float64, T::Int64, T::array(T::Float64)])?;
                let len = if ty.is_numeric() {
                    Some(1)
                } else {
                    facts.array_len.get(name).copied()
                };
                width = width.zip(len).map(|(a, b)| a + b);
                inputs.push(index);
            }
            if let Some(width) = width {
                if width != weights.len() {
                    return Err(PipelineError::schema(
                        i,
                        format!("{} weights for {} features", weights.len(), width),
                    ));
                }
            }
            if weights.iter().any(|w| !w.is_finite()) || !intercept.is_finite() {
                return Err(PipelineError::schema(i, "weights and intercept must be finite"));
            }
            let (out, slot) = place(schema, out_col, T::Float64);
            facts.forget(out_col);
            let plan = StagePlan::LinearScore {
                weights: weights.clone(),
                intercept: *intercept,
                inputs,
                link: *link,
                slot,
            };
            Ok((plan, out))
        }
        StageSpec::BroadcastJoin {
            table_id,
            left_key,
            right_key,
            join,
        } => {
            let table = spec.table(table_id).ok_or_else(|| {
                PipelineError::schema(i, format!("table {table_id:?} is not declared"))
            })?;
            let (left, left_ty) = column(schema, i, left_key, "left key")?;
            let right = table.schema.index_of(right_key).ok_or_else(|| {
                PipelineError::schema(
                    i,
                    format!("right key {right_key:?} not in table {table_id:?}"),
                )
            })?;
            let right_ty = &table.schema.fields()[right].data_type;
            if left_ty != right_ty {
                return Err(PipelineError::schema(
                    i,
                    format!("join keys differ in type: {left_ty} vs {right_ty}"),
                ));
            }
            let mut fields = schema.fields().to_vec();
            for (j, field) in table.schema.fields().iter().enumerate() {
                if j == right {
                    continue;
                }
                if schema.index_of(&field.name).is_some() {
                    return Err(PipelineError::schema(
                        i,
                        format!("joined column {:?} already exists", field.name),
                    ));
                }
                fields.push(field.clone());
            }
            let out = Schema::new(fields).map_err(|e| PipelineError::schema(i, e.to_string()))?;
            let plan = StagePlan::BroadcastJoin {
                table_id: table_id.clone(),
                left,
                right,
                join: *join,
                right_width: table.schema.len() - 1,
            };
            Ok((plan, out))
        }
        StageSpec::Aggregate { key_cols, aggs } => {
            if aggs.is_empty() {
                return Err(PipelineError::schema(i, "Aggregate needs at least one aggregation"));
            }
            let mut keys = Vec::with_capacity(key_cols.len());
            let mut key_fields = Vec::with_capacity(key_cols.len());
            for name in key_cols {
                let (index, ty) = column(schema, i, name, "key")?;
                keys.push(index);
                key_fields.push(Field::new(name.clone(), ty.clone()));
            }
            let mut plans = Vec::with_capacity(aggs.len());
            let mut out_fields = Vec::with_capacity(aggs.len());
            for agg in aggs {
                let input = match &agg.col {
                    Some(name) => Some(column(schema, i, name, "aggregated")?),
                    None => None,
                };
                let out_type = match (agg.func, input) {
                    (AggFn::Count, _) => T::Int64,
                    (_, None) => {
                        return Err(PipelineError::schema(
                            i,
                            format!("{:?} aggregation into {:?} needs a column", agg.func, agg.out_col),
                        ))
                    }
                    (AggFn::Avg, Some((_, ty))) if ty.is_numeric() => T::Float64,
                    (AggFn::Sum, Some((_, ty))) if ty.is_numeric() => ty.clone(),
                    (AggFn::Min | AggFn::Max, Some((_, ty)))
                        if ty.is_numeric() || *ty == T::String =>
                    {
                        ty.clone()
                    }
                    (func, Some((_, ty))) => {
                        return Err(PipelineError::schema(
                            i,
                            format!("cannot apply {func:?} to {ty} column {:?}", agg.col.as_deref().unwrap_or("")),
                        ))
                    }
                };
                out_fields.push(Field::new(agg.out_col.clone(), out_type.clone()));
                plans.push(AggPlan {
                    func: agg.func,
                    input: input.map(|(index, _)| index),
                    out_type,
                });
            }
            let fields = match mode {
                ExecMode::Batch => key_fields.into_iter().chain(out_fields).collect(),
                ExecMode::Serving => schema.fields().iter().cloned().chain(out_fields).collect(),
            };
            let out = Schema::new(fields).map_err(|e| PipelineError::schema(i, e.to_string()))?;
            match mode {
                ExecMode::Batch => {
                    facts.cardinality.retain(|k, _| key_cols.contains(k));
                    facts.array_len.retain(|k, _| key_cols.contains(k));
                }
                ExecMode::Serving => {}
            }
            Ok((
                StagePlan::Aggregate {
                    keys,
                    aggs: plans,
                    mode,
                },
                out,
            ))
        }
        StageSpec::Repartition { key_col, n } => {
            let (key, _) = column(schema, i, key_col, "key")?;
            if *n == 0 {
                return Err(PipelineError::schema(i, "partition count must be positive"));
            }
            Ok((StagePlan::Repartition { key, n: *n }, schema.clone()))
        }
        StageSpec::HttpCall {
            client,
            request,
            out_col,
        } => {
            client
                .validate()
                .map_err(|e| PipelineError::schema(i, format!("client: {e}")))?;
            let template = CompiledTemplate::new(request, schema)
                .map_err(|e| PipelineError::schema(i, format!("request: {e}")))?;
            let (with_resp, response_slot) = place(schema, out_col, T::HttpResponse);
            let error_col = format!("{out_col}_error");
            let (out, error_slot) = place(&with_resp, &error_col, T::String);
            facts.forget(out_col);
            facts.forget(&error_col);
            Ok((
                StagePlan::HttpCall {
                    template: Box::new(template),
                    client: client.clone(),
                    response_slot,
                    error_slot,
                },
                out,
            ))
        }
        StageSpec::LimeExplain {
            lime,
            target_pipeline_id,
            out_col,
        } => {
            lime.lime_config()
                .validate()
                .map_err(|e| PipelineError::schema(i, e.to_string()))?;
            let (input, ty) = column(schema, i, &lime.input_col, "instance")?;
            require_type(i, &lime.input_col, ty, &[T::array(T::Float64)])?;
            if let (Some(neutral), Some(&len)) =
                (&lime.neutral_values, facts.array_len.get(&lime.input_col))
            {
                if neutral.len() != len {
                    return Err(PipelineError::schema(
                        i,
                        format!("{} neutral values for {} features", neutral.len(), len),
                    ));
                }
            }
            let target = spec
                .embedded
                .iter()
                .find(|p| p.id == *target_pipeline_id)
                .ok_or_else(|| {
                    PipelineError::schema(
                        i,
                        format!("target pipeline {target_pipeline_id:?} is not embedded"),
                    )
                })?;
            let target_fields = target.input_schema.fields();
            if target_fields.len() != 1 || target_fields[0].data_type != T::array(T::Float64) {
                return Err(PipelineError::schema(
                    i,
                    "target pipeline must take a single array<float64> column",
                ));
            }
            let target_out = plan_pipeline(target, ExecMode::Batch).map_err(|e| {
                PipelineError::schema(i, format!("target pipeline {target_pipeline_id:?}: {e}"))
            })?;
            let final_schema = target_out.schemas.last().expect("input schema present");
            let (score, score_ty) = column(final_schema, i, &lime.score_col, "score")
                .map_err(|_| {
                    PipelineError::schema(
                        i,
                        format!(
                            "target pipeline output has no column {:?}",
                            lime.score_col
                        ),
                    )
                })?;
            require_type(i, &lime.score_col, score_ty, &[T::Float64, T::Int64])?;
            let (with_weights, slot) = place(schema, out_col, T::array(T::Float64));
            let error_col = format!("{out_col}_error");
            let (out, error_slot) = place(&with_weights, &error_col, T::String);
            facts.forget(out_col);
            facts.forget(&error_col);
            Ok((
                StagePlan::LimeExplain {
                    input,
                    config: lime.clone(),
                    target: Box::new(target.clone()),
                    score,
                    slot,
                    error_slot,
                },
                out,
            ))
        }
    }
}

/// Output schema of a pipeline run in batch mode.
pub fn propagate_schema(spec: &PipelineSpec) -> Result<Schema, PipelineError> {
    propagate_schema_mode(spec, ExecMode::Batch)
}

pub fn propagate_schema_mode(spec: &PipelineSpec, mode: ExecMode) -> Result<Schema, PipelineError> {
    let planned = plan_pipeline(spec, mode)?;
    Ok(planned.schemas.into_iter().last().expect("input schema present"))
}

/// Input schema of every stage followed by the output schema.
pub fn stage_schemas(spec: &PipelineSpec, mode: ExecMode) -> Result<Vec<Schema>, PipelineError> {
    Ok(plan_pipeline(spec, mode)?.schemas)
}
