use super::exec::CompiledPipeline;
use super::spec::PipelineSpec;
use super::tables::Catalog;
use super::{ExecMode, PipelineError};
use crate::row::Row;

/// Single-process reference execution. Every other execution mode is
/// expected to reproduce this output.
pub fn run_batch(spec: &PipelineSpec, rows: Vec<Row>, tables: &Catalog) -> Result<Vec<Row>, PipelineError> {
    let compiled = CompiledPipeline::new(spec, ExecMode::Batch, tables)?;
    compiled.check_input(&rows)?;
    compiled.run(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{AggFn, AggSpec, CmpOp, Expr, StageSpec};
    use crate::row::{DataType, Schema, Value};

    fn ints(xs: &[i64]) -> Vec<Row> {
        xs.iter().map(|&x| Row::new(vec![Value::Int64(x)])).collect()
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let spec = PipelineSpec::new(
            "p",
            Schema::of(&[("x", DataType::Int64)]),
            vec![StageSpec::Filter {
                expr: Expr::cmp(CmpOp::Gt, Expr::col("x"), Expr::lit(1i64)),
            }],
        );
        assert!(run_batch(&spec, vec![], &Catalog::new()).unwrap().is_empty());
    }

    #[test]
    fn filter_keeps_matching_rows() {
        let spec = PipelineSpec::new(
            "p",
            Schema::of(&[("x", DataType::Int64)]),
            vec![StageSpec::Filter {
                expr: Expr::cmp(CmpOp::Gt, Expr::col("x"), Expr::lit(1i64)),
            }],
        );
        let out = run_batch(&spec, ints(&[0, 1, 2, 3]), &Catalog::new()).unwrap();
        assert_eq!(out, ints(&[2, 3]));
    }

    #[test]
    fn count_by_key() {
        let spec = PipelineSpec::new(
            "p",
            Schema::of(&[("k", DataType::String)]),
            vec![StageSpec::Aggregate {
                key_cols: vec!["k".into()],
                aggs: vec![AggSpec {
                    func: AggFn::Count,
                    col: None,
                    out_col: "n".into(),
                }],
            }],
        );
        let rows = ["a", "a", "b"]
            .iter()
            .map(|k| Row::new(vec![Value::from(*k)]))
            .collect();
        let out = run_batch(&spec, rows, &Catalog::new()).unwrap();
        assert_eq!(
            out,
            vec![
                Row::new(vec![Value::from("a"), Value::Int64(2)]),
                Row::new(vec![Value::from("b"), Value::Int64(1)]),
            ]
        );
    }

    #[test]
    fn rejects_nonconforming_input() {
        let spec = PipelineSpec::new(
            "p",
            Schema::of(&[("x", DataType::Int64)]),
            vec![StageSpec::Project {
                columns: vec!["x".into()],
            }],
        );
        let err = run_batch(&spec, vec![Row::new(vec![Value::from("7")])], &Catalog::new());
        assert!(matches!(err, Err(PipelineError::Input { row: 0, .. })));
    }
}
