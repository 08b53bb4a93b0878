use std::fmt;

use super::types::{Row, Schema, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Arity { expected: usize, actual: usize },
    Type {
        field: String,
        expected: String,
        actual: String,
    },
    Invalid { field: String, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Arity { expected, actual } => {
                write!(f, "row has {actual} values, schema has {expected} fields")
            }
            Violation::Type {
                field,
                expected,
                actual,
            } => write!(f, "field {field}: expected {expected}, got {actual}"),
            Violation::Invalid { field, reason } => write!(f, "field {field}: {reason}"),
        }
    }
}

/// Checks arity and per-field types. An empty result means the row is valid.
pub fn validate_row(schema: &Schema, row: &Row) -> Vec<Violation> {
    if row.len() != schema.len() {
        return vec![Violation::Arity {
            expected: schema.len(),
            actual: row.len(),
        }];
    }
    let mut violations = Vec::new();
    for (field, value) in schema.fields().iter().zip(row.values()) {
        if !value.conforms_to(&field.data_type) {
            violations.push(Violation::Type {
                field: field.name.clone(),
                expected: field.data_type.to_string(),
                actual: value.kind().to_string(),
            });
            continue;
        }
        let message = match value {
            Value::HttpRequest(req) => req.check().err(),
            Value::HttpResponse(resp) => resp.check().err(),
            _ => None,
        };
        if let Some(reason) = message {
            violations.push(Violation::Invalid {
                field: field.name.clone(),
                reason,
            });
        }
    }
    violations
}
