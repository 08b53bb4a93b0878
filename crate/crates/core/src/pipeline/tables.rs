use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use super::spec::PipelineSpec;
use super::PipelineError;
use crate::row::{validate_row, DataType, Row, Schema, Value};

/// A small table replicated to every worker for narrow joins.
#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastTable {
    pub table_id: String,
    pub schema: Schema,
    pub rows: Vec<Row>,
}

impl BroadcastTable {
    pub fn new(table_id: &str, schema: Schema, rows: Vec<Row>) -> Result<Self, PipelineError> {
        for (i, row) in rows.iter().enumerate() {
            let violations = validate_row(&schema, row);
            if let Some(v) = violations.first() {
                return Err(PipelineError::Table {
                    table: table_id.to_string(),
                    message: format!("row {i}: {v}"),
                });
            }
        }
        Ok(Self {
            table_id: table_id.to_string(),
            schema,
            rows,
        })
    }

    /// Reads CSV with a header row. Columns are matched to the schema by
    /// name; an empty cell is null except in string columns.
    pub fn from_csv<R: Read>(table_id: &str, schema: Schema, reader: R) -> Result<Self, PipelineError> {
        let err = |message: String| PipelineError::Table {
            table: table_id.to_string(),
            message,
        };
        let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = csv.headers().map_err(|e| err(e.to_string()))?.clone();
        let mut positions = Vec::with_capacity(schema.len());
        for field in schema.fields() {
            let pos = headers
                .iter()
                .position(|h| h == field.name)
                .ok_or_else(|| err(format!("CSV has no column {:?}", field.name)))?;
            positions.push(pos);
        }
        let mut rows = Vec::new();
        for (line, record) in csv.records().enumerate() {
            let record = record.map_err(|e| err(e.to_string()))?;
            let mut values = Vec::with_capacity(schema.len());
            for (field, &pos) in schema.fields().iter().zip(&positions) {
                let cell = record.get(pos).unwrap_or("");
                let value = parse_cell(cell, &field.data_type).map_err(|m| {
                    err(format!("record {}, column {:?}: {m}", line + 1, field.name))
                })?;
                values.push(value);
            }
            rows.push(Row::new(values));
        }
        Self::new(table_id, schema, rows)
    }
}

fn parse_cell(cell: &str, ty: &DataType) -> Result<Value, String> {
    if cell.is_empty() && *ty != DataType::String {
        return Ok(Value::Null);
    }
    match ty {
        DataType::String => Ok(Value::String(cell.to_string())),
        DataType::Int64 => cell.trim().parse().map(Value::Int64).map_err(|e| format!("{e}")),
        DataType::Float64 => cell.trim().parse().map(Value::Float64).map_err(|e| format!("{e}")),
        DataType::Bool => match cell.trim() {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            other => Err(format!("not a bool: {other:?}")),
        },
        DataType::Binary => Ok(Value::Binary(cell.as_bytes().to_vec())),
        other => Err(format!("{other} columns cannot be read from CSV")),
    }
}

/// Broadcast tables by id.
pub type Catalog = HashMap<String, Arc<BroadcastTable>>;

/// Loads every table a pipeline declares with a `csv` path, resolving
/// relative paths against `base_dir`. Tables without a path are skipped and
/// must be supplied by the caller.
pub fn load_tables(spec: &PipelineSpec, base_dir: &Path) -> Result<Catalog, PipelineError> {
    let mut catalog = Catalog::new();
    for decl in &spec.tables {
        let Some(csv) = &decl.csv else { continue };
        let path = base_dir.join(csv);
        let file = std::fs::File::open(&path).map_err(|e| PipelineError::Table {
            table: decl.id.clone(),
            message: format!("{}: {e}", path.display()),
        })?;
        let table = BroadcastTable::from_csv(&decl.id, decl.schema.clone(), file)?;
        catalog.insert(decl.id.clone(), Arc::new(table));
    }
    Ok(catalog)
}
