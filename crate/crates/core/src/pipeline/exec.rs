use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::plan::{plan_pipeline, AggPlan, Slot, StagePlan};
use super::spec::{AggFn, JoinKind, Link, PipelineSpec, StageClass};
use super::tables::Catalog;
use super::{ExecMode, PipelineError};
use crate::http_client::{block_on_io, HttpClient};
use crate::lime::{BlackBox, Explainer, Instance, SegmentationSpec};
use crate::row::{validate_row, DataType, Row, Schema, Value};

/// `dot(weights, features) + intercept`, passed through the link.
pub fn score_linear(
    weights: &[f64],
    intercept: f64,
    features: &[f64],
    link: Link,
) -> Result<f64, PipelineError> {
    if weights.len() != features.len() {
        return Err(PipelineError::Exec {
            stage: 0,
            message: format!(
                "dimension mismatch: {} weights, {} features",
                weights.len(),
                features.len()
            ),
        });
    }
    let z = weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + intercept;
    Ok(match link {
        Link::Identity => z,
        Link::Sigmoid => 1.0 / (1.0 + (-z).exp()),
    })
}

type JoinIndex = HashMap<Value, Vec<Vec<Value>>>;

/// A validated pipeline bound to its broadcast tables, ready to run on any
/// number of partitions concurrently.
#[derive(Clone)]
pub struct CompiledPipeline {
    spec: Arc<PipelineSpec>,
    mode: ExecMode,
    stages: Vec<StagePlan>,
    schemas: Vec<Schema>,
    joins: HashMap<usize, Arc<JoinIndex>>,
    lime_targets: HashMap<usize, Arc<CompiledPipeline>>,
}

impl std::fmt::Debug for CompiledPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompiledPipeline")
            .field("id", &self.spec.id)
            .field("mode", &self.mode)
            .field("stages", &self.stages.len())
            .finish()
    }
}

impl CompiledPipeline {
    pub fn new(spec: &PipelineSpec, mode: ExecMode, catalog: &Catalog) -> Result<Self, PipelineError> {
        let planned = plan_pipeline(spec, mode)?;
        let mut joins = HashMap::new();
        let mut lime_targets = HashMap::new();
        for (i, stage) in planned.stages.iter().enumerate() {
            match stage {
                StagePlan::BroadcastJoin {
                    table_id, right, ..
                } => {
                    let table = catalog.get(table_id).ok_or_else(|| PipelineError::Table {
                        table: table_id.clone(),
                        message: "missing broadcast table".into(),
                    })?;
                    let declared = &spec.table(table_id).expect("checked by planning").schema;
                    if &table.schema != declared {
                        return Err(PipelineError::Table {
                            table: table_id.clone(),
                            message: "loaded schema differs from the declared schema".into(),
                        });
                    }
                    let mut index: JoinIndex = HashMap::new();
                    for row in &table.rows {
                        let key = row.get(*right);
                        if key.is_null() {
                            continue;
                        }
                        let rest: Vec<Value> = row
                            .values()
                            .iter()
                            .enumerate()
                            .filter(|(j, _)| j != right)
                            .map(|(_, v)| v.clone())
                            .collect();
                        index.entry(key.clone()).or_default().push(rest);
                    }
                    joins.insert(i, Arc::new(index));
                }
                StagePlan::LimeExplain { target, .. } => {
                    let compiled = CompiledPipeline::new(target, ExecMode::Batch, catalog)?;
                    lime_targets.insert(i, Arc::new(compiled));
                }
                _ => {}
            }
        }
        Ok(Self {
            spec: Arc::new(spec.clone()),
            mode,
            stages: planned.stages,
            schemas: planned.schemas,
            joins,
            lime_targets,
        })
    }

    pub fn spec(&self) -> &PipelineSpec {
        &self.spec
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn input_schema(&self) -> &Schema {
        &self.schemas[0]
    }

    pub fn output_schema(&self) -> &Schema {
        self.schemas.last().expect("input schema present")
    }

    /// Input schema of stage `i`; `i == stage_count()` gives the output.
    pub fn schema_before(&self, i: usize) -> &Schema {
        &self.schemas[i]
    }

    pub fn stage_class(&self, i: usize) -> StageClass {
        self.spec.stages[i].classify()
    }

    /// Column positions whose values decide the partition of a row entering
    /// wide stage `i`, and the number of partitions it asks for (`None`
    /// means one per worker).
    pub fn shuffle_key(&self, i: usize) -> Option<(Vec<usize>, Option<usize>)> {
        match &self.stages[i] {
            StagePlan::Repartition { key, n } => Some((vec![*key], Some(*n))),
            StagePlan::Aggregate { keys, .. } => Some((keys.clone(), None)),
            _ => None,
        }
    }

    /// Checks rows against the input schema.
    pub fn check_input(&self, rows: &[Row]) -> Result<(), PipelineError> {
        for (i, row) in rows.iter().enumerate() {
            if let Some(v) = validate_row(self.input_schema(), row).first() {
                return Err(PipelineError::Input {
                    row: i,
                    message: v.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Runs every stage in order on one partition. Repartition is the
    /// identity when all rows live in a single process.
    pub fn run(&self, rows: Vec<Row>) -> Result<Vec<Row>, PipelineError> {
        self.run_range(0, self.stages.len(), rows)
    }

    pub fn run_range(&self, from: usize, to: usize, mut rows: Vec<Row>) -> Result<Vec<Row>, PipelineError> {
        for i in from..to {
            rows = self.execute_stage(i, rows)?;
        }
        Ok(rows)
    }

    pub fn execute_stage(&self, i: usize, rows: Vec<Row>) -> Result<Vec<Row>, PipelineError> {
        match &self.stages[i] {
            StagePlan::Project { indices } => Ok(rows
                .into_iter()
                .map(|row| {
                    let values = row.values();
                    Row::new(indices.iter().map(|&j| values[j].clone()).collect())
                })
                .collect()),
            StagePlan::WithColumn { expr, slot } => Ok(rows
                .into_iter()
                .map(|row| {
                    let value = expr.eval(&row);
                    put(row, *slot, value)
                })
                .collect()),
            StagePlan::Filter { expr } => Ok(rows
                .into_iter()
                .filter(|row| expr.eval(row) == Value::Bool(true))
                .collect()),
            StagePlan::StringIndex {
                input,
                dictionary,
                unknown,
                slot,
            } => Ok(rows
                .into_iter()
                .map(|row| {
                    let value = match row.get(*input) {
                        Value::String(s) => Value::Int64(*dictionary.get(s).unwrap_or(unknown)),
                        _ => Value::Null,
                    };
                    put(row, *slot, value)
                })
                .collect()),
            StagePlan::OneHot {
                input,
                cardinality,
                slot,
            } => Ok(rows
                .into_iter()
                .map(|row| {
                    let value = match row.get(*input) {
                        Value::Int64(k) if *k >= 0 && (*k as usize) < *cardinality => {
                            let mut v = vec![0.0; *cardinality];
                            v[*k as usize] = 1.0;
                            Value::float_array(&v)
                        }
                        _ => Value::Null,
                    };
                    put(row, *slot, value)
                })
                .collect()),
            StagePlan::LinearScore {
                weights,
                intercept,
                inputs,
                link,
                slot,
            } => rows
                .into_iter()
                .map(|row| {
                    let value = match gather_features(&row, inputs) {
                        Some(features) => Value::Float64(
                            score_linear(weights, *intercept, &features, *link).map_err(|e| {
                                PipelineError::exec(i, e.to_string().replace("stage 0 failed: ", ""))
                            })?,
                        ),
                        None => Value::Null,
                    };
                    Ok(put(row, *slot, value))
                })
                .collect(),
            StagePlan::BroadcastJoin {
                left,
                join,
                right_width,
                ..
            } => {
                let index = &self.joins[&i];
                let mut out = Vec::with_capacity(rows.len());
                for row in rows {
                    let matches = index.get(row.get(*left)).filter(|_| !row.get(*left).is_null());
                    match (matches, join) {
                        (Some(found), _) => {
                            for rest in found {
                                let mut values = row.values().to_vec();
                                values.extend(rest.iter().cloned());
                                out.push(Row::new(values));
                            }
                        }
                        (None, JoinKind::Left) => {
                            let mut values = row.into_values();
                            values.extend(std::iter::repeat_n(Value::Null, *right_width));
                            out.push(Row::new(values));
                        }
                        (None, JoinKind::Inner) => {}
                    }
                }
                Ok(out)
            }
            StagePlan::Aggregate { keys, aggs, mode } => Ok(aggregate(rows, keys, aggs, *mode)),
            StagePlan::Repartition { .. } => Ok(rows),
            StagePlan::HttpCall {
                template,
                client,
                response_slot,
                error_slot,
            } => {
                let built: Vec<Result<_, String>> = rows.iter().map(|r| template.build(r)).collect();
                let requests: Vec<_> = built.iter().filter_map(|b| b.as_ref().ok().cloned()).collect();
                let client = HttpClient::new(client.clone());
                let mut outcomes = if requests.is_empty() {
                    Vec::new()
                } else {
                    block_on_io(client.execute_partition(requests))
                }
                .into_iter();
                Ok(rows
                    .into_iter()
                    .zip(built)
                    .map(|(row, built)| {
                        let (response, error) = match built {
                            Err(message) => (Value::Null, Value::String(message)),
                            Ok(_) => match outcomes.next().expect("one outcome per request").result {
                                Ok(resp) => (Value::HttpResponse(Box::new(resp)), Value::Null),
                                Err(e) => (
                                    Value::Null,
                                    Value::String(
                                        serde_json::to_string(&e).expect("error records serialize"),
                                    ),
                                ),
                            },
                        };
                        put(put(row, *response_slot, response), *error_slot, error)
                    })
                    .collect())
            }
            StagePlan::LimeExplain {
                input,
                config,
                score,
                slot,
                error_slot,
                ..
            } => {
                let target = self.lime_targets[&i].clone();
                let blackbox = PipelineBlackBox {
                    pipeline: target,
                    score: *score,
                };
                let results: Vec<(Value, Value)> = rows
                    .par_iter()
                    .map(|row| {
                        let Some(features) = row.get(*input).as_float_vec() else {
                            return (Value::Null, Value::String("instance is null".into()));
                        };
                        let neutral = config
                            .neutral_values
                            .clone()
                            .unwrap_or_else(|| vec![0.0; features.len()]);
                        let explained = Explainer::new(
                            SegmentationSpec::Tabular {
                                neutral_values: neutral,
                            },
                            config.lime_config(),
                        )
                        .and_then(|ex| {
                            ex.explain(&[Instance::Tabular(features)], &blackbox)
                                .pop()
                                .expect("one explanation per instance")
                        });
                        match explained {
                            Ok(e) => (Value::float_array(&e.weights), Value::Null),
                            Err(e) => (Value::Null, Value::String(e.to_string())),
                        }
                    })
                    .collect();
                Ok(rows
                    .into_iter()
                    .zip(results)
                    .map(|(row, (weights, error))| put(put(row, *slot, weights), *error_slot, error))
                    .collect())
            }
        }
    }
}

fn put(row: Row, slot: Slot, value: Value) -> Row {
    let mut values = row.into_values();
    match slot {
        Slot::Replace(i) => values[i] = value,
        Slot::Append => values.push(value),
    }
    Row::new(values)
}

fn gather_features(row: &Row, inputs: &[usize]) -> Option<Vec<f64>> {
    let mut features = Vec::new();
    for &i in inputs {
        match row.get(i) {
            Value::Array(items) => {
                for item in items {
                    features.push(item.as_f64()?);
                }
            }
            other => features.push(other.as_f64()?),
        }
    }
    Some(features)
}

trait FloatVec {
    fn as_float_vec(&self) -> Option<Vec<f64>>;
}

impl FloatVec for Value {
    fn as_float_vec(&self) -> Option<Vec<f64>> {
        match self {
            Value::Array(items) => items.iter().map(Value::as_f64).collect(),
            _ => None,
        }
    }
}

/// Scores perturbed instances by running them through a compiled pipeline.
struct PipelineBlackBox {
    pipeline: Arc<CompiledPipeline>,
    score: usize,
}

impl BlackBox for PipelineBlackBox {
    fn evaluate(&self, instances: &[Instance]) -> Vec<Result<f64, String>> {
        // Rows are scored one at a time so a failing or filtered sample
        // cannot shift the scores of its neighbors.
        instances
            .iter()
            .map(|instance| {
                let Instance::Tabular(features) = instance else {
                    return Err("pipeline black boxes score tabular instances".to_string());
                };
                let rows = self
                    .pipeline
                    .run(vec![Row::new(vec![Value::float_array(features)])])
                    .map_err(|e| e.to_string())?;
                match rows.as_slice() {
                    [row] => row
                        .get(self.score)
                        .as_f64()
                        .ok_or_else(|| "null score".to_string()),
                    other => Err(format!("target produced {} rows for one instance", other.len())),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Acc {
    Count(i64),
    SumInt(Option<i64>, bool),
    SumFloat(Option<f64>),
    Avg(f64, u64),
    Extreme(Option<Value>),
}

impl Acc {
    fn new(plan: &AggPlan) -> Self {
        match (plan.func, &plan.out_type) {
            (AggFn::Count, _) => Acc::Count(0),
            (AggFn::Sum, DataType::Int64) => Acc::SumInt(None, false),
            (AggFn::Sum, _) => Acc::SumFloat(None),
            (AggFn::Avg, _) => Acc::Avg(0.0, 0),
            (AggFn::Min | AggFn::Max, _) => Acc::Extreme(None),
        }
    }

    fn update(&mut self, func: AggFn, value: Option<&Value>) {
        match (self, value) {
            (Acc::Count(n), None) => *n += 1,
            (_, Some(Value::Null)) => {}
            (Acc::Count(n), Some(_)) => *n += 1,
            (Acc::SumInt(total, overflow), Some(v)) => {
                let x = v.as_i64().expect("typed int64");
                match total {
                    None => *total = Some(x),
                    Some(t) => match t.checked_add(x) {
                        Some(s) => *t = s,
                        None => *overflow = true,
                    },
                }
            }
            (Acc::SumFloat(total), Some(v)) => {
                *total = Some(total.unwrap_or(0.0) + v.as_f64().expect("numeric"))
            }
            (Acc::Avg(sum, n), Some(v)) => {
                *sum += v.as_f64().expect("numeric");
                *n += 1;
            }
            (Acc::Extreme(best), Some(v)) => {
                let replace = match best {
                    None => true,
                    Some(b) => {
                        let ord = compare_values(v, b);
                        if func == AggFn::Min {
                            ord == std::cmp::Ordering::Less
                        } else {
                            ord == std::cmp::Ordering::Greater
                        }
                    }
                };
                if replace {
                    *best = Some(v.clone());
                }
            }
            (acc, None) => unreachable!("{acc:?} needs an input column"),
        }
    }

    fn finish(self) -> Value {
        match self {
            Acc::Count(n) => Value::Int64(n),
            Acc::SumInt(_, true) | Acc::SumInt(None, _) => Value::Null,
            Acc::SumInt(Some(t), false) => Value::Int64(t),
            Acc::SumFloat(t) => t.map(Value::Float64).unwrap_or(Value::Null),
            Acc::Avg(_, 0) => Value::Null,
            Acc::Avg(sum, n) => Value::Float64(sum / n as f64),
            Acc::Extreme(v) => v.unwrap_or(Value::Null),
        }
    }
}

fn compare_values(a: &Value, b: &Value) -> std::cmp::Ordering {
    match (a, b) {
        (Value::Int64(x), Value::Int64(y)) => x.cmp(y),
        (Value::String(x), Value::String(y)) => x.cmp(y),
        _ => a.as_f64().unwrap_or(f64::NAN).total_cmp(&b.as_f64().unwrap_or(f64::NAN)),
    }
}

/// Groups in order of first appearance so output is deterministic.
fn aggregate(rows: Vec<Row>, keys: &[usize], aggs: &[AggPlan], mode: ExecMode) -> Vec<Row> {
    let mut group_of: HashMap<Vec<Value>, usize> = HashMap::new();
    let mut groups: Vec<(Vec<Value>, Vec<Acc>)> = Vec::new();
    let mut membership = Vec::with_capacity(rows.len());
    for row in &rows {
        let key: Vec<Value> = keys.iter().map(|&k| row.get(k).clone()).collect();
        let g = *group_of.entry(key.clone()).or_insert_with(|| {
            groups.push((key, aggs.iter().map(Acc::new).collect()));
            groups.len() - 1
        });
        for (acc, plan) in groups[g].1.iter_mut().zip(aggs) {
            acc.update(plan.func, plan.input.map(|c| row.get(c)));
        }
        membership.push(g);
    }
    let results: Vec<(Vec<Value>, Vec<Value>)> = groups
        .into_iter()
        .map(|(key, accs)| (key, accs.into_iter().map(Acc::finish).collect()))
        .collect();
    match mode {
        ExecMode::Batch => results
            .into_iter()
            .map(|(mut key, outs)| {
                key.extend(outs);
                Row::new(key)
            })
            .collect(),
        ExecMode::Serving => rows
            .into_iter()
            .zip(membership)
            .map(|(row, g)| {
                let mut values = row.into_values();
                values.extend(results[g].1.iter().cloned());
                Row::new(values)
            })
            .collect(),
    }
}
