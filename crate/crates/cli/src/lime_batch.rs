//! Batch LIME over a CSV of tabular instances or a directory of PPM images.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use flowserve_core::lime::{
    BlackBox, Explainer, Instance, LimeError, LimeStageConfig, RgbImage, SegmentationSpec,
};
use flowserve_core::pipeline::{
    load_tables, parse_pipeline, run_batch, CompiledPipeline, ExecMode, PipelineSpec, StageSpec,
};
use flowserve_core::row::{Row, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LimeBatchError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl LimeBatchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LimeBatchError::Invalid(_) => crate::EXIT_VALIDATION,
            LimeBatchError::Runtime(_) => crate::EXIT_RUNTIME,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> LimeBatchError {
    LimeBatchError::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> LimeBatchError {
    LimeBatchError::Runtime(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageOptions {
    pub cell_w: usize,
    pub cell_h: usize,
    pub neutral: [u8; 3],
}

impl Default for ImageOptions {
    fn default() -> Self {
        Self {
            cell_w: 8,
            cell_h: 8,
            neutral: [128, 128, 128],
        }
    }
}

/// One output line: an instance label and either weights or an error.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainedRow {
    pub instance: String,
    pub weights: Option<Vec<f64>>,
    pub error: Option<String>,
}

/// The explaining pipeline with its single `LimeExplain` stage resolved.
pub struct LimeJob {
    spec: PipelineSpec,
    base_dir: PathBuf,
    stage: LimeStageConfig,
    out_col: String,
    target: PipelineSpec,
}

impl LimeJob {
    pub fn load(pipeline: &Path) -> Result<Self, LimeBatchError> {
        let text = std::fs::read_to_string(pipeline).map_err(|e| invalid(format!("{}: {e}", pipeline.display())))?;
        let spec = parse_pipeline(&text).map_err(invalid)?;
        let mut lime = spec.stages.iter().filter_map(|s| match s {
            StageSpec::LimeExplain {
                lime,
                target_pipeline_id,
                out_col,
            } => Some((lime.clone(), target_pipeline_id.clone(), out_col.clone())),
            _ => None,
        });
        let (stage, target_id, out_col) = lime
            .next()
            .ok_or_else(|| invalid("pipeline has no LimeExplain stage"))?;
        if lime.next().is_some() {
            return Err(invalid("pipeline has more than one LimeExplain stage"));
        }
        let target = spec
            .embedded
            .iter()
            .find(|p| p.id == target_id)
            .cloned()
            .ok_or_else(|| invalid(format!("target pipeline {target_id:?} is not embedded")))?;
        let base_dir = pipeline.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            spec,
            base_dir,
            stage,
            out_col,
            target,
        })
    }

    /// Explains every row of a CSV by running the pipeline in batch mode.
    /// A header line is recognized when its first field is not a number.
    pub fn explain_csv(&self, csv_path: &Path) -> Result<Vec<ExplainedRow>, LimeBatchError> {
        let fields = self.spec.input_schema.fields();
        if fields.len() != 1 || fields[0].name != self.stage.input_col {
            return Err(invalid(format!(
                "csv input needs a pipeline whose only input column is {:?}",
                self.stage.input_col
            )));
        }
        let instances = read_instances(csv_path)?;
        let rows: Vec<Row> = instances
            .iter()
            .map(|x| Row::new(vec![Value::float_array(x)]))
            .collect();
        let catalog = load_tables(&self.spec, &self.base_dir).map_err(invalid)?;
        let out = run_batch(&self.spec, rows, &catalog).map_err(runtime)?;
        let compiled = CompiledPipeline::new(&self.spec, ExecMode::Batch, &catalog).map_err(invalid)?;
        let schema = compiled.output_schema();
        let w = schema.index_of(&self.out_col).expect("planner adds the weights column");
        let e = schema
            .index_of(&format!("{}_error", self.out_col))
            .expect("planner adds the error column");
        if out.len() != instances.len() {
            return Err(runtime(format!("{} instances produced {} rows", instances.len(), out.len())));
        }
        Ok(out
            .iter()
            .enumerate()
            .map(|(i, row)| ExplainedRow {
                instance: i.to_string(),
                weights: float_vec(row.get(w)),
                error: row.get(e).as_str().map(str::to_string),
            })
            .collect())
    }

    /// Explains every `.ppm` file in `dir` (sorted by name) over a fixed
    /// grid. The target pipeline scores the image as a flat array of
    /// channel bytes, row-major RGB.
    pub fn explain_images(&self, dir: &Path, options: &ImageOptions) -> Result<Vec<ExplainedRow>, LimeBatchError> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| invalid(format!("{}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(invalid(format!("no .ppm files in {}", dir.display())));
        }
        let catalog = load_tables(&self.target, &self.base_dir).map_err(invalid)?;
        let compiled = CompiledPipeline::new(&self.target, ExecMode::Batch, &catalog).map_err(invalid)?;
        let score = compiled
            .output_schema()
            .index_of(&self.stage.score_col)
            .ok_or_else(|| invalid(format!("target output has no column {:?}", self.stage.score_col)))?;
        let blackbox = ImageBlackBox {
            pipeline: Arc::new(compiled),
            score,
        };
        let mut out = Vec::new();
        for path in paths {
            let label = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let image = std::fs::File::open(&path)
                .map_err(|e| LimeError::Instance(format!("{}: {e}", path.display())))
                .and_then(RgbImage::read_ppm);
            let explained = image.and_then(|image| {
                let seg = SegmentationSpec::ImageGrid {
                    width: image.width,
                    height: image.height,
                    cell_w: options.cell_w,
                    cell_h: options.cell_h,
                    neutral_color: options.neutral,
                };
                let explainer = Explainer::new(seg, self.stage.lime_config())?;
                explainer
                    .explain(&[Instance::Image(image)], &blackbox)
                    .pop()
                    .expect("one explanation per instance")
            });
            out.push(match explained {
                Ok(e) => ExplainedRow {
                    instance: label,
                    weights: Some(e.weights),
                    error: None,
                },
                Err(e) => ExplainedRow {
                    instance: label,
                    weights: None,
                    error: Some(e.to_string()),
                },
            });
        }
        Ok(out)
    }
}

struct ImageBlackBox {
    pipeline: Arc<CompiledPipeline>,
    score: usize,
}

impl BlackBox for ImageBlackBox {
    fn evaluate(&self, instances: &[Instance]) -> Vec<Result<f64, String>> {
        instances
            .iter()
            .map(|instance| {
                let Instance::Image(image) = instance else {
                    return Err("expected an image instance".to_string());
                };
                let pixels: Vec<f64> = image.pixels.iter().map(|&b| f64::from(b)).collect();
                let rows = self
                    .pipeline
                    .run(vec![Row::new(vec![Value::float_array(&pixels)])])
                    .map_err(|e| e.to_string())?;
                match rows.as_slice() {
                    [row] => row.get(self.score).as_f64().ok_or_else(|| "null score".to_string()),
                    other => Err(format!("target produced {} rows for one image", other.len())),
                }
            })
            .collect()
    }
}

fn float_vec(value: &Value) -> Option<Vec<f64>> {
    match value {
        Value::Array(items) => items.iter().map(Value::as_f64).collect(),
        _ => None,
    }
}

pub fn read_instances(path: &Path) -> Result<Vec<Vec<f64>>, LimeBatchError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if line == 0 && record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let values = record
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| invalid(format!("{} line {}: {e}", path.display(), line + 1)))?;
        out.push(values);
    }
    if out.is_empty() {
        return Err(invalid(format!("{} has no instances", path.display())));
    }
    Ok(out)
}

/// Columns: `instance`, `w0..w{d-1}`, `error`.
pub fn write_csv(path: &Path, rows: &[ExplainedRow]) -> Result<(), LimeBatchError> {
    let d = rows.iter().filter_map(|r| r.weights.as_ref().map(Vec::len)).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    let mut header = vec!["instance".to_string()];
    header.extend((0..d).map(|i| format!("w{i}")));
    header.push("error".into());
    w.write_record(&header).map_err(runtime)?;
    for row in rows {
        let mut record = vec![row.instance.clone()];
        let weights = row.weights.clone().unwrap_or_default();
        record.extend((0..d).map(|i| weights.get(i).map(|v| v.to_string()).unwrap_or_default()));
        record.push(row.error.clone().unwrap_or_default());
        w.write_record(&record).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "a,b\n1,2\n3.5, 4\n").unwrap();
        assert_eq!(read_instances(&p).unwrap(), vec![vec![1.0, 2.0], vec![3.5, 4.0]]);
        std::fs::write(&p, "1,x\n").unwrap();
        assert!(matches!(read_instances(&p), Err(LimeBatchError::Invalid(_))));
    }

    #[test]
    fn csv_output_pads_failed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.csv");
        let rows = vec![
            ExplainedRow {
                instance: "0".into(),
                weights: Some(vec![0.5, -1.0]),
                error: None,
            },
            ExplainedRow {
                instance: "1".into(),
                weights: None,
                error: Some("boom".into()),
            },
        ];
        write_csv(&p, &rows).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "instance,w0,w1,error\n0,0.5,-1,\n1,,,boom\n"
        );
    }
}
