use std::collections::HashSet;

use serde_json::error::Category;

use super::plan::plan_pipeline;
use super::spec::{PipelineSpec, FORMAT_VERSION};
use super::PipelineError;

/// Parses and validates a pipeline document. Malformed JSON yields a
/// `Parse` error with line and column; well-formed JSON that does not
/// describe a valid pipeline yields a `Semantic` error with the JSON path,
/// or a `Schema` error naming the failing stage.
pub fn parse_pipeline(text: &str) -> Result<PipelineSpec, PipelineError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let spec: PipelineSpec = match serde_path_to_error::deserialize(&mut de) {
        Ok(spec) => spec,
        Err(err) => {
            let path = err.path().to_string();
            let inner = err.into_inner();
            return Err(match inner.classify() {
                Category::Syntax | Category::Eof | Category::Io => PipelineError::Parse {
                    line: inner.line(),
                    column: inner.column(),
                    message: strip_position(&inner.to_string()),
                },
                Category::Data => PipelineError::Semantic {
                    path: if path == "." { "$".into() } else { path },
                    message: format!(
                        "{} (line {}, column {})",
                        strip_position(&inner.to_string()),
                        inner.line(),
                        inner.column()
                    ),
                },
            });
        }
    };
    de.end().map_err(|e| PipelineError::Parse {
        line: e.line(),
        column: e.column(),
        message: strip_position(&e.to_string()),
    })?;
    validate_spec(&spec)?;
    Ok(spec)
}

fn strip_position(message: &str) -> String {
    match message.rfind(" at line ") {
        Some(i) => message[..i].to_string(),
        None => message.to_string(),
    }
}

/// Semantic checks beyond the document shape: version, unique ids, and a
/// successful schema walk for this pipeline and every embedded one.
/// Pipelines with a routing-id input column are checked in serving mode.
pub fn validate_spec(spec: &PipelineSpec) -> Result<(), PipelineError> {
    if spec.version != FORMAT_VERSION {
        return Err(PipelineError::Semantic {
            path: "version".into(),
            message: format!("unsupported version {:?}, expected {FORMAT_VERSION:?}", spec.version),
        });
    }
    if spec.id.is_empty() {
        return Err(PipelineError::Semantic {
            path: "id".into(),
            message: "pipeline id must not be empty".into(),
        });
    }
    let mut seen = HashSet::new();
    for (i, table) in spec.tables.iter().enumerate() {
        if !seen.insert(&table.id) {
            return Err(PipelineError::Semantic {
                path: format!("tables[{i}].id"),
                message: format!("duplicate table id {:?}", table.id),
            });
        }
    }
    let mut seen = HashSet::new();
    for (i, embedded) in spec.embedded.iter().enumerate() {
        if !seen.insert(&embedded.id) {
            return Err(PipelineError::Semantic {
                path: format!("embedded[{i}].id"),
                message: format!("duplicate embedded pipeline id {:?}", embedded.id),
            });
        }
        validate_spec(embedded).map_err(|e| PipelineError::Semantic {
            path: format!("embedded[{i}]"),
            message: e.to_string(),
        })?;
    }
    plan_pipeline(spec, spec.natural_mode())?;
    Ok(())
}
