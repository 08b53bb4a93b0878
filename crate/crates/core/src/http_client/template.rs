use std::collections::BTreeMap;

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};

use crate::pipeline::ParamBinding;
use crate::row::{DataType, HttpRequestData, Row, Schema, Value};

const URI_SLOT: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'.')
    .remove(b'_')
    .remove(b'~');

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct HeaderBinding {
    pub name: String,
    pub value: ParamBinding,
}

/// Describes how one row becomes one HTTP request. Every binding is either a
/// literal shared by all rows or a column read per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RequestTemplate {
    pub method: ParamBinding,
    /// URI with `{name}` slots, each bound in `params`.
    pub uri_pattern: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamBinding>,
    #[serde(default)]
    pub headers: Vec<HeaderBinding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<ParamBinding>,
}

#[derive(Debug, Clone)]
enum Piece {
    Text(String),
    Slot(String),
}

fn split_pattern(pattern: &str) -> Result<Vec<Piece>, String> {
    let mut pieces = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Text(rest[..open].to_string()));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| format!("unterminated placeholder in {pattern:?}"))?;
        let name = &rest[open + 1..open + close];
        if name.is_empty() {
            return Err(format!("empty placeholder in {pattern:?}"));
        }
        pieces.push(Piece::Slot(name.to_string()));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_string()));
    }
    Ok(pieces)
}

#[derive(Debug, Clone)]
enum Bound {
    Lit(Value),
    Col { index: usize, name: String },
}

impl Bound {
    fn resolve(binding: &ParamBinding, schema: &Schema, what: &str) -> Result<(Self, DataType), String> {
        match binding {
            ParamBinding::Lit(lit) => {
                let ty = lit
                    .data_type()
                    .ok_or_else(|| format!("{what}: unsupported literal"))?;
                Ok((Bound::Lit(lit.0.clone()), ty))
            }
            ParamBinding::Col(name) => {
                let index = schema
                    .index_of(name)
                    .ok_or_else(|| format!("{what}: column {name:?} not in input schema"))?;
                let ty = schema.fields()[index].data_type.clone();
                Ok((
                    Bound::Col {
                        index,
                        name: name.clone(),
                    },
                    ty,
                ))
            }
        }
    }

    fn value<'a>(&'a self, row: &'a Row, what: &str) -> Result<&'a Value, String> {
        let value = match self {
            Bound::Lit(v) => v,
            Bound::Col { index, .. } => row.get(*index),
        };
        if value.is_null() {
            let source = match self {
                Bound::Col { name, .. } => format!("column {name:?}"),
                Bound::Lit(_) => "literal".to_string(),
            };
            return Err(format!("{what}: null value from {source}"));
        }
        Ok(value)
    }
}

fn is_stringifiable(ty: &DataType) -> bool {
    matches!(
        ty,
        DataType::String | DataType::Int64 | DataType::Float64 | DataType::Bool | DataType::Binary
    )
}

/// A template resolved against an input schema.
#[derive(Debug, Clone)]
pub struct CompiledTemplate {
    method: Bound,
    uri: Vec<(Piece, Option<Bound>)>,
    headers: Vec<(String, Bound)>,
    body: Option<Bound>,
}

impl CompiledTemplate {
    pub fn new(template: &RequestTemplate, schema: &Schema) -> Result<Self, String> {
        let (method, method_ty) = Bound::resolve(&template.method, schema, "method")?;
        if method_ty != DataType::String {
            return Err(format!("method must be a string, got {method_ty}"));
        }
        let mut uri = Vec::new();
        for piece in split_pattern(&template.uri_pattern)? {
            match &piece {
                Piece::Text(_) => uri.push((piece, None)),
                Piece::Slot(name) => {
                    let binding = template
                        .params
                        .get(name)
                        .ok_or_else(|| format!("placeholder {{{name}}} has no binding"))?;
                    let (bound, ty) = Bound::resolve(binding, schema, &format!("param {name}"))?;
                    if !is_stringifiable(&ty) {
                        return Err(format!("param {name}: cannot place {ty} in a URI"));
                    }
                    uri.push((piece, Some(bound)));
                }
            }
        }
        let mut headers = Vec::new();
        for header in &template.headers {
            let (bound, ty) =
                Bound::resolve(&header.value, schema, &format!("header {}", header.name))?;
            if !is_stringifiable(&ty) {
                return Err(format!("header {}: cannot stringify {ty}", header.name));
            }
            headers.push((header.name.clone(), bound));
        }
        let body = match &template.body {
            Some(binding) => {
                let (bound, ty) = Bound::resolve(binding, schema, "body")?;
                if !is_stringifiable(&ty) {
                    return Err(format!("body: cannot serialize {ty}"));
                }
                Some(bound)
            }
            None => None,
        };
        Ok(Self {
            method,
            uri,
            headers,
            body,
        })
    }

    /// Builds the request for one row. A null in any binding is a row-level
    /// error, not a failure of the stage.
    pub fn build(&self, row: &Row) -> Result<HttpRequestData, String> {
        let method = self.method.value(row, "method")?.render().to_ascii_uppercase();
        let mut uri = String::new();
        for (piece, bound) in &self.uri {
            match (piece, bound) {
                (Piece::Text(text), _) => uri.push_str(text),
                (Piece::Slot(name), Some(bound)) => {
                    let value = bound.value(row, &format!("param {name}"))?.render();
                    uri.extend(utf8_percent_encode(&value, URI_SLOT));
                }
                (Piece::Slot(_), None) => unreachable!("slots are always bound"),
            }
        }
        let mut headers = Vec::with_capacity(self.headers.len());
        for (name, bound) in &self.headers {
            let value = bound.value(row, &format!("header {name}"))?.render();
            headers.push((name.clone(), value));
        }
        let body = match &self.body {
            Some(bound) => match bound.value(row, "body")? {
                Value::Binary(bytes) => bytes.clone(),
                other => other.render().into_bytes(),
            },
            None => Vec::new(),
        };
        Ok(HttpRequestData {
            method,
            uri,
            headers,
            body,
        })
    }
}

/// One-shot convenience over [`CompiledTemplate`].
pub fn build_request(
    template: &RequestTemplate,
    schema: &Schema,
    row: &Row,
) -> Result<HttpRequestData, String> {
    CompiledTemplate::new(template, schema)?.build(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::of(&[("k", DataType::String), ("n", DataType::Int64)])
    }

    #[test]
    fn literal_template_is_row_independent() {
        let t = RequestTemplate {
            method: ParamBinding::lit("post"),
            uri_pattern: "http://svc/score".into(),
            params: BTreeMap::new(),
            headers: vec![HeaderBinding {
                name: "Ocp-Apim-Subscription-Key".into(),
                value: ParamBinding::lit("k1"),
            }],
            body: Some(ParamBinding::lit("{}")),
        };
        let c = CompiledTemplate::new(&t, &schema()).unwrap();
        let a = c.build(&Row::new(vec!["a".into(), Value::Int64(1)])).unwrap();
        let b = c.build(&Row::new(vec!["b".into(), Value::Int64(2)])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.method, "POST");
    }

    #[test]
    fn column_binding_vectorizes_uri() {
        let t = RequestTemplate {
            method: ParamBinding::lit("GET"),
            uri_pattern: "/t?key={k}".into(),
            params: [("k".to_string(), ParamBinding::col("k"))].into_iter().collect(),
            headers: vec![],
            body: None,
        };
        let c = CompiledTemplate::new(&t, &schema()).unwrap();
        let a = c.build(&Row::new(vec!["a".into(), Value::Int64(1)])).unwrap();
        let b = c.build(&Row::new(vec!["b".into(), Value::Int64(1)])).unwrap();
        assert_eq!(a.uri, "/t?key=a");
        assert_eq!(b.uri, "/t?key=b");
    }

    #[test]
    fn null_binding_is_row_error() {
        let t = RequestTemplate {
            method: ParamBinding::lit("GET"),
            uri_pattern: "/x/{n}".into(),
            params: [("n".to_string(), ParamBinding::col("n"))].into_iter().collect(),
            headers: vec![],
            body: None,
        };
        let c = CompiledTemplate::new(&t, &schema()).unwrap();
        let err = c.build(&Row::new(vec!["a".into(), Value::Null])).unwrap_err();
        assert!(err.contains("null"), "{err}");
    }

    #[test]
    fn unbound_placeholder_and_missing_column_rejected() {
        let mut t = RequestTemplate {
            method: ParamBinding::lit("GET"),
            uri_pattern: "/x/{missing}".into(),
            params: BTreeMap::new(),
            headers: vec![],
            body: None,
        };
        assert!(CompiledTemplate::new(&t, &schema()).is_err());
        t.params
            .insert("missing".into(), ParamBinding::col("nope"));
        assert!(CompiledTemplate::new(&t, &schema()).is_err());
    }

    #[test]
    fn slot_values_are_percent_encoded() {
        let t = RequestTemplate {
            method: ParamBinding::lit("GET"),
            uri_pattern: "/q?text={k}".into(),
            params: [("k".to_string(), ParamBinding::col("k"))].into_iter().collect(),
            headers: vec![],
            body: None,
        };
        let req = build_request(&t, &schema(), &Row::new(vec!["a b&c".into(), Value::Int64(0)]))
            .unwrap();
        assert_eq!(req.uri, "/q?text=a%20b%26c");
    }
}
