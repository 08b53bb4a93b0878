use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ExecMode;
use crate::http_client::{ClientConfig, RequestTemplate};
use crate::lime::LimeStageConfig;
use crate::row::{DataType, Schema, Value};

pub const FORMAT_VERSION: &str = "v1";

/// A literal as it appears in pipeline documents: a JSON scalar, or an array
/// of numbers (read as `array<float64>`).
#[derive(Debug, Clone, PartialEq)]
pub struct Literal(pub Value);

impl Literal {
    pub fn data_type(&self) -> Option<DataType> {
        match &self.0 {
            Value::String(_) => Some(DataType::String),
            Value::Int64(_) => Some(DataType::Int64),
            Value::Float64(_) => Some(DataType::Float64),
            Value::Bool(_) => Some(DataType::Bool),
            Value::Array(_) => Some(DataType::array(DataType::Float64)),
            _ => None,
        }
    }
}

fn json_to_value(json: &serde_json::Value) -> Result<Value, String> {
    match json {
        serde_json::Value::String(s) => Ok(Value::String(s.clone())),
        serde_json::Value::Bool(b) => Ok(Value::Bool(*b)),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Ok(Value::Int64(i))
            } else {
                n.as_f64()
                    .map(Value::Float64)
                    .ok_or_else(|| format!("unrepresentable number {n}"))
            }
        }
        serde_json::Value::Array(items) => items
            .iter()
            .map(|item| {
                item.as_f64()
                    .map(Value::Float64)
                    .ok_or_else(|| "array literals must contain only numbers".to_string())
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Value::Array),
        serde_json::Value::Null => {
            Err("untyped null literal; use {\"null\": \"<type>\"}".to_string())
        }
        serde_json::Value::Object(_) => Err("object literals are not supported".to_string()),
    }
}

fn value_to_json(value: &Value) -> serde_json::Value {
    match value {
        Value::String(s) => serde_json::Value::String(s.clone()),
        Value::Int64(i) => (*i).into(),
        Value::Float64(f) => serde_json::Number::from_f64(*f)
            .map(serde_json::Value::Number)
            .unwrap_or(serde_json::Value::Null),
        Value::Bool(b) => (*b).into(),
        Value::Array(items) => items.iter().map(value_to_json).collect(),
        _ => serde_json::Value::Null,
    }
}

impl<'de> Deserialize<'de> for Literal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let json = serde_json::Value::deserialize(deserializer)?;
        json_to_value(&json)
            .map(Literal)
            .map_err(serde::de::Error::custom)
    }
}

impl Serialize for Literal {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        value_to_json(&self.0).serialize(serializer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArithOp {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
    #[serde(rename = "/")]
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum FuncName {
    Lower,
    Length,
    Utf8,
    Bytes,
    ToString,
    ToFloat,
    RequestBody,
    RequestMethod,
    RequestUri,
    RequestHeader,
    HttpResponse,
    ResponseStatus,
    ResponseBody,
    Sum,
    Mean,
}

impl fmt::Display for FuncName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let json = serde_json::to_value(self).expect("serializable");
        f.write_str(json.as_str().unwrap_or("?"))
    }
}

/// Row-level expression language.
///
/// JSON forms: `{"col": "x"}`, `{"lit": 3}`, `{"null": "int64"}`,
/// `{"arith": ["+", a, b]}`, `{"cmp": [">", a, b]}`, `{"concat": [a, b]}`,
/// `{"fn": {"name": "lower", "args": [a]}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub enum Expr {
    Col(String),
    Lit(Literal),
    Null(DataType),
    Arith(ArithOp, Box<Expr>, Box<Expr>),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    Concat(Vec<Expr>),
    #[serde(rename = "fn")]
    Func { name: FuncName, args: Vec<Expr> },
}

impl Expr {
    pub fn col(name: &str) -> Expr {
        Expr::Col(name.to_string())
    }

    pub fn lit(value: impl Into<Value>) -> Expr {
        Expr::Lit(Literal(value.into()))
    }

    pub fn arith(op: ArithOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Arith(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn cmp(op: CmpOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Cmp(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn call(name: FuncName, args: Vec<Expr>) -> Expr {
        Expr::Func { name, args }
    }
}

/// A stage parameter bound either to a constant or to a column of the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub enum ParamBinding {
    Lit(Literal),
    Col(String),
}

impl ParamBinding {
    pub fn lit(value: impl Into<Value>) -> Self {
        ParamBinding::Lit(Literal(value.into()))
    }

    pub fn col(name: &str) -> Self {
        ParamBinding::Col(name.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Link {
    Identity,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum JoinKind {
    Inner,
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AggFn {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AggSpec {
    #[serde(rename = "fn")]
    pub func: AggFn,
    /// Omitted for `count`, which then counts rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col: Option<String>,
    pub out_col: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "kind",
    rename_all_fields = "camelCase",
    deny_unknown_fields
)]
pub enum StageSpec {
    Project {
        columns: Vec<String>,
    },
    WithColumn {
        name: String,
        expr: Expr,
    },
    Filter {
        expr: Expr,
    },
    StringIndex {
        in_col: String,
        out_col: String,
        dictionary: BTreeMap<String, i64>,
    },
    OneHot {
        in_col: String,
        out_col: String,
        cardinality: usize,
    },
    LinearScore {
        weights: Vec<f64>,
        intercept: f64,
        in_cols: Vec<String>,
        out_col: String,
        link: Link,
    },
    BroadcastJoin {
        table_id: String,
        left_key: String,
        right_key: String,
        join: JoinKind,
    },
    Aggregate {
        key_cols: Vec<String>,
        aggs: Vec<AggSpec>,
    },
    Repartition {
        key_col: String,
        n: usize,
    },
    HttpCall {
        client: ClientConfig,
        request: RequestTemplate,
        out_col: String,
    },
    LimeExplain {
        lime: LimeStageConfig,
        target_pipeline_id: String,
        out_col: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum StageClass {
    Narrow,
    Wide,
}

impl StageSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            StageSpec::Project { .. } => "Project",
            StageSpec::WithColumn { .. } => "WithColumn",
            StageSpec::Filter { .. } => "Filter",
            StageSpec::StringIndex { .. } => "StringIndex",
            StageSpec::OneHot { .. } => "OneHot",
            StageSpec::LinearScore { .. } => "LinearScore",
            StageSpec::BroadcastJoin { .. } => "BroadcastJoin",
            StageSpec::Aggregate { .. } => "Aggregate",
            StageSpec::Repartition { .. } => "Repartition",
            StageSpec::HttpCall { .. } => "HttpCall",
            StageSpec::LimeExplain { .. } => "LimeExplain",
        }
    }

    /// Wide stages need rows moved between workers; everything else runs
    /// per partition. Broadcast joins are narrow because every worker holds
    /// the full table.
    pub fn classify(&self) -> StageClass {
        match self {
            StageSpec::Aggregate { .. } | StageSpec::Repartition { .. } => StageClass::Wide,
            _ => StageClass::Narrow,
        }
    }
}

pub fn classify_stage(stage: &StageSpec) -> StageClass {
    stage.classify()
}

/// A broadcast table referenced by `BroadcastJoin`. The schema is declared
/// so that schema propagation works without loading data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TableDecl {
    pub id: String,
    pub schema: Schema,
    /// CSV file with a header row; relative paths resolve against the
    /// pipeline document's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
}

fn default_version() -> String {
    FORMAT_VERSION.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PipelineSpec {
    #[serde(default = "default_version")]
    pub version: String,
    pub id: String,
    pub input_schema: Schema,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tables: Vec<TableDecl>,
    /// Pipelines referenced by `LimeExplain` stages.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub embedded: Vec<PipelineSpec>,
    pub stages: Vec<StageSpec>,
}

impl PipelineSpec {
    pub fn new(id: &str, input_schema: Schema, stages: Vec<StageSpec>) -> Self {
        Self {
            version: default_version(),
            id: id.to_string(),
            input_schema,
            tables: Vec::new(),
            embedded: Vec::new(),
            stages,
        }
    }

    pub fn is_all_narrow(&self) -> bool {
        self.stages
            .iter()
            .all(|s| s.classify() == StageClass::Narrow)
    }

    /// Serving pipelines carry the request's routing id as an input column.
    pub fn is_serving(&self) -> bool {
        self.input_schema
            .fields()
            .iter()
            .any(|f| f.data_type == DataType::RoutingId)
    }

    /// Mode used to validate the document on its own.
    pub fn natural_mode(&self) -> ExecMode {
        if self.is_serving() {
            ExecMode::Serving
        } else {
            ExecMode::Batch
        }
    }

    pub fn table(&self, id: &str) -> Option<&TableDecl> {
        self.tables.iter().find(|t| t.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pipeline specs serialize")
    }
}
