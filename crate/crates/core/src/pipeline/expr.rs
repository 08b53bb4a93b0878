use std::cmp::Ordering;

use super::spec::{ArithOp, CmpOp, Expr, FuncName};
use crate::row::{DataType, HttpResponseData, Row, Schema, Value};

/// An expression with column references resolved to positions and its
/// result type computed.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    node: Node,
    data_type: DataType,
}

#[derive(Debug, Clone)]
enum Node {
    Col(usize),
    Lit(Value),
    Arith(ArithOp, Box<CompiledExpr>, Box<CompiledExpr>),
    Cmp(CmpOp, Box<CompiledExpr>, Box<CompiledExpr>),
    Concat(Vec<CompiledExpr>),
    Func(FuncName, Vec<CompiledExpr>),
}

fn arity(name: FuncName, args: usize, allowed: &[usize]) -> Result<(), String> {
    if allowed.contains(&args) {
        Ok(())
    } else {
        Err(format!("{name} takes {allowed:?} arguments, got {args}"))
    }
}

fn expect(name: FuncName, arg: &CompiledExpr, allowed: &[DataType]) -> Result<(), String> {
    if allowed.contains(&arg.data_type) {
        Ok(())
    } else {
        let names: Vec<String> = allowed.iter().map(|t| t.to_string()).collect();
        Err(format!(
            "{name} expects {}, got {}",
            names.join(" or "),
            arg.data_type
        ))
    }
}

impl CompiledExpr {
    pub fn compile(expr: &Expr, schema: &Schema) -> Result<Self, String> {
        use DataType as T;
        let (node, data_type) = match expr {
            Expr::Col(name) => {
                let index = schema
                    .index_of(name)
                    .ok_or_else(|| format!("unknown column {name:?}"))?;
                (Node::Col(index), schema.fields()[index].data_type.clone())
            }
            Expr::Lit(lit) => {
                let ty = lit
                    .data_type()
                    .ok_or_else(|| "unsupported literal".to_string())?;
                (Node::Lit(lit.0.clone()), ty)
            }
            Expr::Null(ty) => (Node::Lit(Value::Null), ty.clone()),
            Expr::Arith(op, lhs, rhs) => {
                let l = Self::compile(lhs, schema)?;
                let r = Self::compile(rhs, schema)?;
                if !l.data_type.is_numeric() || !r.data_type.is_numeric() {
                    return Err(format!(
                        "arithmetic needs numeric operands, got {} and {}",
                        l.data_type, r.data_type
                    ));
                }
                let ty = if *op == ArithOp::Div || l.data_type == T::Float64 || r.data_type == T::Float64 {
                    T::Float64
                } else {
                    T::Int64
                };
                (Node::Arith(*op, Box::new(l), Box::new(r)), ty)
            }
            Expr::Cmp(op, lhs, rhs) => {
                let l = Self::compile(lhs, schema)?;
                let r = Self::compile(rhs, schema)?;
                let numeric = l.data_type.is_numeric() && r.data_type.is_numeric();
                let comparable = matches!(l.data_type, T::String | T::Bool | T::Binary | T::Int64 | T::Float64);
                if !numeric && !(comparable && l.data_type == r.data_type) {
                    return Err(format!(
                        "cannot compare {} with {}",
                        l.data_type, r.data_type
                    ));
                }
                (Node::Cmp(*op, Box::new(l), Box::new(r)), T::Bool)
            }
            Expr::Concat(parts) => {
                let parts = parts
                    .iter()
                    .map(|p| Self::compile(p, schema))
                    .collect::<Result<Vec<_>, _>>()?;
                if let Some(bad) = parts.iter().find(|p| p.data_type != T::String) {
                    return Err(format!("concat expects string parts, got {}", bad.data_type));
                }
                (Node::Concat(parts), T::String)
            }
            Expr::Func { name, args } => {
                let args = args
                    .iter()
                    .map(|a| Self::compile(a, schema))
                    .collect::<Result<Vec<_>, _>>()?;
                let name = *name;
                let ty = match name {
                    FuncName::Lower => {
                        arity(name, args.len(), &[1])?;
                        expect(name, &args[0], &[T::String])?;
                        T::String
                    }
                    FuncName::Length => {
                        arity(name, args.len(), &[1])?;
                        if !matches!(args[0].data_type, T::String | T::Binary | T::Array(_)) {
                            return Err(format!(
                                "length expects string, binary or array, got {}",
                                args[0].data_type
                            ));
                        }
                        T::Int64
                    }
                    FuncName::Utf8 => {
                        arity(name, args.len(), &[1])?;
                        expect(name, &args[0], &[T::Binary])?;
                        T::String
                    }
                    FuncName::Bytes => {
                        arity(name, args.len(), &[1])?;
                        expect(name, &args[0], &[T::String])?;
                        T::Binary
                    }
                    FuncName::ToString => {
                        arity(name, args.len(), &[1])?;
                        expect(name, &args[0], &[T::String, T::Int64, T::Float64, T::Bool])?;
                        T::String
                    }
                    FuncName::ToFloat => {
                        arity(name, args.len(), &[1])?;
                        expect(name, &args[0], &[T::String, T::Int64, T::Float64])?;
                        T::Float64
                    }
                    FuncName::RequestBody => {
                        arity(name, args.len(), &[1])?;
                        expect(name, &args[0], &[T::HttpRequest])?;
                        T::Binary
                    }
                    FuncName::RequestMethod | FuncName::RequestUri => {
                        arity(name, args.len(), &[1])?;
                        expect(name, &args[0], &[T::HttpRequest])?;
                        T::String
                    }
                    FuncName::RequestHeader => {
                        arity(name, args.len(), &[2])?;
                        expect(name, &args[0], &[T::HttpRequest])?;
                        expect(name, &args[1], &[T::String])?;
                        T::String
                    }
                    FuncName::HttpResponse => {
                        arity(name, args.len(), &[2, 3])?;
                        expect(name, &args[0], &[T::Int64])?;
                        expect(name, &args[1], &[T::Binary, T::String])?;
                        if let Some(ct) = args.get(2) {
                            expect(name, ct, &[T::String])?;
                        }
                        T::HttpResponse
                    }
                    FuncName::ResponseStatus => {
                        arity(name, args.len(), &[1])?;
                        expect(name, &args[0], &[T::HttpResponse])?;
                        T::Int64
                    }
                    FuncName::ResponseBody => {
                        arity(name, args.len(), &[1])?;
                        expect(name, &args[0], &[T::HttpResponse])?;
                        T::Binary
                    }
                    FuncName::Sum | FuncName::Mean => {
                        arity(name, args.len(), &[1])?;
                        expect(name, &args[0], &[T::array(T::Float64)])?;
                        T::Float64
                    }
                };
                (Node::Func(name, args), ty)
            }
        };
        Ok(Self { node, data_type })
    }

    pub fn data_type(&self) -> &DataType {
        &self.data_type
    }

    /// Strict evaluation: any null operand gives null, as do division by
    /// zero and integer overflow.
    pub fn eval(&self, row: &Row) -> Value {
        match &self.node {
            Node::Col(i) => row.get(*i).clone(),
            Node::Lit(v) => v.clone(),
            Node::Arith(op, l, r) => arith(*op, &l.eval(row), &r.eval(row), &self.data_type),
            Node::Cmp(op, l, r) => compare(*op, &l.eval(row), &r.eval(row)),
            Node::Concat(parts) => {
                let mut out = String::new();
                for p in parts {
                    match p.eval(row) {
                        Value::String(s) => out.push_str(&s),
                        _ => return Value::Null,
                    }
                }
                Value::String(out)
            }
            Node::Func(name, args) => {
                let values: Vec<Value> = args.iter().map(|a| a.eval(row)).collect();
                if values.iter().any(Value::is_null) {
                    return Value::Null;
                }
                call(*name, values)
            }
        }
    }
}

fn arith(op: ArithOp, l: &Value, r: &Value, ty: &DataType) -> Value {
    if l.is_null() || r.is_null() {
        return Value::Null;
    }
    if *ty == DataType::Int64 {
        let (a, b) = (l.as_i64().unwrap(), r.as_i64().unwrap());
        let out = match op {
            ArithOp::Add => a.checked_add(b),
            ArithOp::Sub => a.checked_sub(b),
            ArithOp::Mul => a.checked_mul(b),
            ArithOp::Div => unreachable!("division is typed float64"),
        };
        return out.map(Value::Int64).unwrap_or(Value::Null);
    }
    let (a, b) = (l.as_f64().unwrap(), r.as_f64().unwrap());
    match op {
        ArithOp::Add => Value::Float64(a + b),
        ArithOp::Sub => Value::Float64(a - b),
        ArithOp::Mul => Value::Float64(a * b),
        ArithOp::Div if b == 0.0 => Value::Null,
        ArithOp::Div => Value::Float64(a / b),
    }
}

fn compare(op: CmpOp, l: &Value, r: &Value) -> Value {
    let ordering = match (l, r) {
        (Value::Null, _) | (_, Value::Null) => return Value::Null,
        (Value::Int64(a), Value::Int64(b)) => Some(a.cmp(b)),
        (Value::String(a), Value::String(b)) => Some(a.cmp(b)),
        (Value::Bool(a), Value::Bool(b)) => Some(a.cmp(b)),
        (Value::Binary(a), Value::Binary(b)) => Some(a.cmp(b)),
        _ => l.as_f64().unwrap().partial_cmp(&r.as_f64().unwrap()),
    };
    // NaN compares unequal to everything, as in IEEE arithmetic.
    let Some(ordering) = ordering else {
        return Value::Bool(op == CmpOp::Ne);
    };
    Value::Bool(match op {
        CmpOp::Eq => ordering == Ordering::Equal,
        CmpOp::Ne => ordering != Ordering::Equal,
        CmpOp::Lt => ordering == Ordering::Less,
        CmpOp::Le => ordering != Ordering::Greater,
        CmpOp::Gt => ordering == Ordering::Greater,
        CmpOp::Ge => ordering != Ordering::Less,
    })
}

fn text_or_bytes(v: Value) -> Vec<u8> {
    match v {
        Value::String(s) => s.into_bytes(),
        Value::Binary(b) => b,
        _ => unreachable!("type checked"),
    }
}

fn call(name: FuncName, mut args: Vec<Value>) -> Value {
    let first = args.remove(0);
    match name {
        FuncName::Lower => Value::String(first.as_str().unwrap().to_lowercase()),
        FuncName::Length => Value::Int64(match &first {
            Value::String(s) => s.chars().count() as i64,
            Value::Binary(b) => b.len() as i64,
            Value::Array(items) => items.len() as i64,
            _ => unreachable!("type checked"),
        }),
        FuncName::Utf8 => match first {
            Value::Binary(b) => String::from_utf8(b).map(Value::String).unwrap_or(Value::Null),
            _ => unreachable!("type checked"),
        },
        FuncName::Bytes => Value::Binary(text_or_bytes(first)),
        FuncName::ToString => match first {
            Value::String(s) => Value::String(s),
            other => Value::String(other.render()),
        },
        FuncName::ToFloat => match first {
            Value::String(s) => s
                .trim()
                .parse::<f64>()
                .map(Value::Float64)
                .unwrap_or(Value::Null),
            other => Value::Float64(other.as_f64().unwrap()),
        },
        FuncName::RequestBody => Value::Binary(first.as_request().unwrap().body.clone()),
        FuncName::RequestMethod => Value::String(first.as_request().unwrap().method.clone()),
        FuncName::RequestUri => Value::String(first.as_request().unwrap().uri.clone()),
        FuncName::RequestHeader => {
            let name = args[0].as_str().unwrap();
            first
                .as_request()
                .unwrap()
                .header(name)
                .map(|v| Value::String(v.to_string()))
                .unwrap_or(Value::Null)
        }
        FuncName::HttpResponse => {
            let status = first.as_i64().unwrap();
            if !(100..=599).contains(&status) {
                return Value::Null;
            }
            let mut args = args.into_iter();
            let body = text_or_bytes(args.next().unwrap());
            let mut resp = HttpResponseData::new(status as u16, body);
            if let Some(ct) = args.next() {
                resp = resp.with_header("Content-Type", ct.as_str().unwrap());
            }
            Value::HttpResponse(Box::new(resp))
        }
        FuncName::ResponseStatus => Value::Int64(first.as_response().unwrap().status as i64),
        FuncName::ResponseBody => Value::Binary(first.as_response().unwrap().body.clone()),
        FuncName::Sum | FuncName::Mean => {
            let Value::Array(items) = first else {
                unreachable!("type checked")
            };
            let mut total = 0.0;
            for item in &items {
                match item.as_f64() {
                    Some(v) => total += v,
                    None => return Value::Null,
                }
            }
            if name == FuncName::Sum {
                Value::Float64(total)
            } else if items.is_empty() {
                Value::Null
            } else {
                Value::Float64(total / items.len() as f64)
            }
        }
    }
}

/// Type-checks `expr` against `schema` and evaluates it on `row`.
pub fn eval_expr(expr: &Expr, schema: &Schema, row: &Row) -> Result<Value, String> {
    Ok(CompiledExpr::compile(expr, schema)?.eval(row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::row::HttpRequestData;

    fn eval0(expr: Expr) -> Value {
        eval_expr(&expr, &Schema::of(&[]), &Row::new(vec![])).unwrap()
    }

    #[test]
    fn literal_product() {
        assert_eq!(
            eval0(Expr::arith(ArithOp::Mul, Expr::lit(3i64), Expr::lit(4i64))),
            Value::Int64(12)
        );
    }

    #[test]
    fn null_propagates() {
        let schema = Schema::of(&[("x", DataType::Int64)]);
        let e = Expr::arith(ArithOp::Add, Expr::col("x"), Expr::lit(1i64));
        assert_eq!(eval_expr(&e, &schema, &Row::new(vec![Value::Null])).unwrap(), Value::Null);
        let c = Expr::cmp(CmpOp::Gt, Expr::col("x"), Expr::lit(1i64));
        assert_eq!(eval_expr(&c, &schema, &Row::new(vec![Value::Null])).unwrap(), Value::Null);
    }

    #[test]
    fn division_by_zero_is_null() {
        assert_eq!(eval0(Expr::arith(ArithOp::Div, Expr::lit(1i64), Expr::lit(0i64))), Value::Null);
        assert_eq!(
            eval0(Expr::arith(ArithOp::Div, Expr::lit(1.0), Expr::lit(0.0))),
            Value::Null
        );
        assert_eq!(
            eval0(Expr::arith(ArithOp::Div, Expr::lit(3i64), Expr::lit(2i64))),
            Value::Float64(1.5)
        );
    }

    #[test]
    fn mixed_arithmetic_widens() {
        let e = Expr::arith(ArithOp::Add, Expr::lit(1i64), Expr::lit(0.5));
        let c = CompiledExpr::compile(&e, &Schema::of(&[])).unwrap();
        assert_eq!(c.data_type(), &DataType::Float64);
        assert_eq!(eval0(e), Value::Float64(1.5));
    }

    #[test]
    fn overflow_is_null() {
        let e = Expr::arith(ArithOp::Add, Expr::lit(i64::MAX), Expr::lit(1i64));
        assert_eq!(eval0(e), Value::Null);
    }

    #[test]
    fn type_errors() {
        let schema = Schema::of(&[("s", DataType::String)]);
        assert!(CompiledExpr::compile(&Expr::arith(ArithOp::Add, Expr::col("s"), Expr::lit(1i64)), &schema).is_err());
        assert!(CompiledExpr::compile(&Expr::col("z"), &schema)
            .unwrap_err()
            .contains("\"z\""));
        assert!(CompiledExpr::compile(&Expr::cmp(CmpOp::Eq, Expr::col("s"), Expr::lit(1i64)), &schema).is_err());
        assert!(CompiledExpr::compile(&Expr::call(FuncName::Lower, vec![]), &schema).is_err());
    }

    #[test]
    fn string_functions() {
        let schema = Schema::of(&[("s", DataType::String)]);
        let row = Row::new(vec![Value::from("HeLLo")]);
        let lower = Expr::call(FuncName::Lower, vec![Expr::col("s")]);
        assert_eq!(eval_expr(&lower, &schema, &row).unwrap(), Value::from("hello"));
        let len = Expr::call(FuncName::Length, vec![Expr::col("s")]);
        assert_eq!(eval_expr(&len, &schema, &row).unwrap(), Value::Int64(5));
        let cat = Expr::Concat(vec![Expr::col("s"), Expr::lit("!")]);
        assert_eq!(eval_expr(&cat, &schema, &row).unwrap(), Value::from("HeLLo!"));
    }

    #[test]
    fn request_to_response() {
        let schema = Schema::of(&[("request", DataType::HttpRequest)]);
        let req = HttpRequestData::new("POST", "/x")
            .with_header("X-Key", "k1")
            .with_body(b"payload".to_vec());
        let row = Row::new(vec![Value::from(req)]);
        let echo = Expr::call(
            FuncName::HttpResponse,
            vec![
                Expr::lit(200i64),
                Expr::call(FuncName::RequestBody, vec![Expr::col("request")]),
            ],
        );
        let Value::HttpResponse(resp) = eval_expr(&echo, &schema, &row).unwrap() else {
            panic!("response expected")
        };
        assert_eq!(resp.status, 200);
        assert_eq!(resp.body, b"payload");
        let header = Expr::call(
            FuncName::RequestHeader,
            vec![Expr::col("request"), Expr::lit("x-key")],
        );
        assert_eq!(eval_expr(&header, &schema, &row).unwrap(), Value::from("k1"));
    }

    #[test]
    fn array_reductions() {
        let schema = Schema::of(&[("v", DataType::array(DataType::Float64))]);
        let row = Row::new(vec![Value::float_array(&[1.0, 2.0, 6.0])]);
        let mean = Expr::call(FuncName::Mean, vec![Expr::col("v")]);
        assert_eq!(eval_expr(&mean, &schema, &row).unwrap(), Value::Float64(3.0));
    }
}
