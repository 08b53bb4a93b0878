use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::RowError;

/// Column type. Arrays nest, but HTTP messages and routing ids are only
/// allowed at the top level of a column.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DataType {
    String,
    Int64,
    Float64,
    Bool,
    Binary,
    Array(Box<DataType>),
    HttpRequest,
    HttpResponse,
    RoutingId,
}

impl DataType {
    pub fn array(element: DataType) -> Self {
        DataType::Array(Box::new(element))
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, DataType::Int64 | DataType::Float64)
    }

    /// Checks the nesting rule: array elements may not be HTTP messages or
    /// routing ids.
    pub fn check(&self) -> Result<(), RowError> {
        match self {
            DataType::Array(inner) => match inner.as_ref() {
                DataType::HttpRequest | DataType::HttpResponse | DataType::RoutingId => {
                    Err(RowError::InvalidType(self.to_string()))
                }
                other => other.check(),
            },
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataType::String => f.write_str("string"),
            DataType::Int64 => f.write_str("int64"),
            DataType::Float64 => f.write_str("float64"),
            DataType::Bool => f.write_str("bool"),
            DataType::Binary => f.write_str("binary"),
            DataType::Array(inner) => write!(f, "array<{inner}>"),
            DataType::HttpRequest => f.write_str("httpRequest"),
            DataType::HttpResponse => f.write_str("httpResponse"),
            DataType::RoutingId => f.write_str("routingId"),
        }
    }
}

impl FromStr for DataType {
    type Err = RowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let ty = match s {
            "string" => DataType::String,
            "int64" => DataType::Int64,
            "float64" => DataType::Float64,
            "bool" => DataType::Bool,
            "binary" => DataType::Binary,
            "httpRequest" => DataType::HttpRequest,
            "httpResponse" => DataType::HttpResponse,
            "routingId" => DataType::RoutingId,
            _ => {
                let inner = s
                    .strip_prefix("array<")
                    .and_then(|rest| rest.strip_suffix('>'))
                    .ok_or_else(|| RowError::InvalidType(s.to_string()))?;
                DataType::array(inner.parse()?)
            }
        };
        ty.check()?;
        Ok(ty)
    }
}

impl Serialize for DataType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DataType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    #[serde(rename = "type")]
    pub data_type: DataType,
}

impl Field {
    pub fn new(name: impl Into<String>, data_type: DataType) -> Self {
        Self {
            name: name.into(),
            data_type,
        }
    }
}

/// Ordered, uniquely named columns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Schema {
    fields: Vec<Field>,
}

impl Schema {
    pub fn new(fields: Vec<Field>) -> Result<Self, RowError> {
        for (i, field) in fields.iter().enumerate() {
            field.data_type.check()?;
            if fields[..i].iter().any(|f| f.name == field.name) {
                return Err(RowError::DuplicateField(field.name.clone()));
            }
        }
        Ok(Self { fields })
    }

    /// Shorthand for tests and fixtures; panics on duplicate names.
    pub fn of(fields: &[(&str, DataType)]) -> Self {
        Self::new(
            fields
                .iter()
                .map(|(n, t)| Field::new(*n, t.clone()))
                .collect(),
        )
        .expect("valid schema")
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Appends a column, or replaces the type of an existing one in place.
    pub fn with_column(&self, name: &str, data_type: DataType) -> Schema {
        let mut fields = self.fields.clone();
        match fields.iter_mut().find(|f| f.name == name) {
            Some(f) => f.data_type = data_type,
            None => fields.push(Field::new(name, data_type)),
        }
        Schema { fields }
    }
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let fields = Vec::<Field>::deserialize(deserializer)?;
        Schema::new(fields).map_err(serde::de::Error::custom)
    }
}

/// Correlates a reply with the open connection it answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoutingId {
    pub worker_id: u32,
    pub seq: u64,
}

impl RoutingId {
    pub fn new(worker_id: u32, seq: u64) -> Self {
        Self { worker_id, seq }
    }
}

impl fmt::Display for RoutingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.worker_id, self.seq)
    }
}

pub type Headers = Vec<(String, String)>;

fn find_header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HttpRequestData {
    pub method: String,
    pub uri: String,
    pub headers: Headers,
    pub body: Vec<u8>,
}

impl HttpRequestData {
    pub fn new(method: impl Into<String>, uri: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            uri: uri.into(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn with_body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }

    /// Case-insensitive header lookup.
    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn check(&self) -> Result<(), String> {
        if self.method.is_empty() {
            return Err("empty method".into());
        }
        if let Some(declared) = self.header("content-length") {
            let declared: usize = declared
                .trim()
                .parse()
                .map_err(|_| format!("unparseable content-length {declared:?}"))?;
            if declared != self.body.len() {
                return Err(format!(
                    "content-length {declared} but body has {} bytes",
                    self.body.len()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponseData {
    pub status: u16,
    pub reason: String,
    pub headers: Headers,
    pub body: Vec<u8>,
}

impl HttpResponseData {
    /// Response with the canonical reason phrase for `status`.
    pub fn new(status: u16, body: impl Into<Vec<u8>>) -> Self {
        Self {
            status,
            reason: canonical_reason(status).to_string(),
            headers: Vec::new(),
            body: body.into(),
        }
    }

    pub fn empty(status: u16) -> Self {
        Self::new(status, Vec::new())
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn check(&self) -> Result<(), String> {
        if !(100..=599).contains(&self.status) {
            return Err(format!("status {} outside 100..=599", self.status));
        }
        Ok(())
    }
}

pub fn canonical_reason(status: u16) -> &'static str {
    http::StatusCode::from_u16(status)
        .ok()
        .and_then(|s| s.canonical_reason())
        .unwrap_or("")
}

/// A single cell. `Null` is untyped; the owning schema supplies the type.
#[derive(Debug, Clone)]
pub enum Value {
    Null,
    String(String),
    Int64(i64),
    Float64(f64),
    Bool(bool),
    Binary(Vec<u8>),
    Array(Vec<Value>),
    HttpRequest(Box<HttpRequestData>),
    HttpResponse(Box<HttpResponseData>),
    RoutingId(RoutingId),
}

// Floats compare by bit pattern so that equality is reflexive and agrees
// with the byte encoding.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        use Value::*;
        match (self, other) {
            (Null, Null) => true,
            (String(a), String(b)) => a == b,
            (Int64(a), Int64(b)) => a == b,
            (Float64(a), Float64(b)) => a.to_bits() == b.to_bits(),
            (Bool(a), Bool(b)) => a == b,
            (Binary(a), Binary(b)) => a == b,
            (Array(a), Array(b)) => a == b,
            (HttpRequest(a), HttpRequest(b)) => a == b,
            (HttpResponse(a), HttpResponse(b)) => a == b,
            (RoutingId(a), RoutingId(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl std::hash::Hash for Value {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        super::codec::encode_value(self).hash(state)
    }
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    /// Whether this value may sit in a column of type `ty`.
    pub fn conforms_to(&self, ty: &DataType) -> bool {
        match (self, ty) {
            (Value::Null, _) => true,
            (Value::String(_), DataType::String)
            | (Value::Int64(_), DataType::Int64)
            | (Value::Float64(_), DataType::Float64)
            | (Value::Bool(_), DataType::Bool)
            | (Value::Binary(_), DataType::Binary)
            | (Value::HttpRequest(_), DataType::HttpRequest)
            | (Value::HttpResponse(_), DataType::HttpResponse)
            | (Value::RoutingId(_), DataType::RoutingId) => true,
            (Value::Array(items), DataType::Array(inner)) => {
                items.iter().all(|v| v.conforms_to(inner))
            }
            _ => false,
        }
    }

    /// Short name of the runtime variant, used in diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::String(_) => "string",
            Value::Int64(_) => "int64",
            Value::Float64(_) => "float64",
            Value::Bool(_) => "bool",
            Value::Binary(_) => "binary",
            Value::Array(_) => "array",
            Value::HttpRequest(_) => "httpRequest",
            Value::HttpResponse(_) => "httpResponse",
            Value::RoutingId(_) => "routingId",
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float64(v) => Some(*v),
            Value::Int64(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_routing_id(&self) -> Option<RoutingId> {
        match self {
            Value::RoutingId(id) => Some(*id),
            _ => None,
        }
    }

    pub fn as_response(&self) -> Option<&HttpResponseData> {
        match self {
            Value::HttpResponse(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_request(&self) -> Option<&HttpRequestData> {
        match self {
            Value::HttpRequest(r) => Some(r),
            _ => None,
        }
    }

    pub fn float_array(values: &[f64]) -> Value {
        Value::Array(values.iter().copied().map(Value::Float64).collect())
    }

    /// Human-readable rendering used by `to_string` and CSV output.
    pub fn render(&self) -> String {
        match self {
            Value::Null => String::new(),
            Value::String(s) => s.clone(),
            Value::Int64(v) => v.to_string(),
            Value::Float64(v) => v.to_string(),
            Value::Bool(v) => v.to_string(),
            Value::Binary(b) => String::from_utf8_lossy(b).into_owned(),
            Value::Array(items) => {
                let parts: Vec<String> = items.iter().map(Value::render).collect();
                format!("[{}]", parts.join(","))
            }
            Value::HttpRequest(r) => format!("{} {}", r.method, r.uri),
            Value::HttpResponse(r) => format!("{} {}", r.status, r.reason),
            Value::RoutingId(id) => id.to_string(),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::String(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::String(s)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int64(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float64(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<HttpRequestData> for Value {
    fn from(v: HttpRequestData) -> Self {
        Value::HttpRequest(Box::new(v))
    }
}

impl From<HttpResponseData> for Value {
    fn from(v: HttpResponseData) -> Self {
        Value::HttpResponse(Box::new(v))
    }
}

impl From<RoutingId> for Value {
    fn from(v: RoutingId) -> Self {
        Value::RoutingId(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Row {
    values: Vec<Value>,
}

impl Row {
    pub fn new(values: Vec<Value>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Vec<Value> {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Value> {
        self.values
    }

    pub fn get(&self, index: usize) -> &Value {
        &self.values[index]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl From<Vec<Value>> for Row {
    fn from(values: Vec<Value>) -> Self {
        Row::new(values)
    }
}
