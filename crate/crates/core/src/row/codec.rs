//! Canonical binary row encoding.
//!
//! This layout is the wire contract used by shuffle and routing frames, so it
//! must stay bit-exact between workers of the same build. All integers are
//! little-endian.
//!
//! ```text
//! row      := len:u32  arity:u32  value{arity}        len counts arity + values
//! value    := 0x00                                    null
//!           | 0x01 tag:u8 payload
//! payload  := string   (tag 1)  n:u32 utf8[n]
//!           | int64    (tag 2)  i64
//!           | float64  (tag 3)  u64 (IEEE-754 bits)
//!           | bool     (tag 4)  u8 (0 or 1)
//!           | binary   (tag 5)  n:u32 byte[n]
//!           | array    (tag 6)  n:u32 value{n}
//!           | request  (tag 7)  method:str uri:str headers body:bytes
//!           | response (tag 8)  status:u16 reason:str headers body:bytes
//!           | routing  (tag 9)  worker:u32 seq:u64
//! headers  := n:u32 (name:str value:str){n}
//! ```

use thiserror::Error;

use super::types::{DataType, HttpRequestData, HttpResponseData, Row, RoutingId, Schema, Value};

const TAG_STRING: u8 = 1;
const TAG_INT64: u8 = 2;
const TAG_FLOAT64: u8 = 3;
const TAG_BOOL: u8 = 4;
const TAG_BINARY: u8 = 5;
const TAG_ARRAY: u8 = 6;
const TAG_REQUEST: u8 = 7;
const TAG_RESPONSE: u8 = 8;
const TAG_ROUTING: u8 = 9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("field {field}: expected {expected}, found tag {found}")]
    TypeMismatch {
        field: String,
        expected: String,
        found: u8,
    },
    #[error("row arity {found} does not match schema arity {expected}")]
    Arity { expected: usize, found: usize },
    #[error("invalid presence flag {0}")]
    Presence(u8),
    #[error("invalid bool byte {0}")]
    Bool(u8),
    #[error("invalid utf-8 at offset {0}")]
    Utf8(usize),
    #[error("row length prefix {declared} disagrees with {consumed} bytes consumed")]
    Length { declared: usize, consumed: usize },
    #[error("{0} trailing bytes after row")]
    Trailing(usize),
}

impl CodecError {
    pub fn is_framing(&self) -> bool {
        matches!(
            self,
            CodecError::Truncated { .. } | CodecError::Length { .. } | CodecError::Trailing(_)
        )
    }
}

fn tag_of(value: &Value) -> u8 {
    match value {
        Value::Null => 0,
        Value::String(_) => TAG_STRING,
        Value::Int64(_) => TAG_INT64,
        Value::Float64(_) => TAG_FLOAT64,
        Value::Bool(_) => TAG_BOOL,
        Value::Binary(_) => TAG_BINARY,
        Value::Array(_) => TAG_ARRAY,
        Value::HttpRequest(_) => TAG_REQUEST,
        Value::HttpResponse(_) => TAG_RESPONSE,
        Value::RoutingId(_) => TAG_ROUTING,
    }
}

fn expected_tag(ty: &DataType) -> u8 {
    match ty {
        DataType::String => TAG_STRING,
        DataType::Int64 => TAG_INT64,
        DataType::Float64 => TAG_FLOAT64,
        DataType::Bool => TAG_BOOL,
        DataType::Binary => TAG_BINARY,
        DataType::Array(_) => TAG_ARRAY,
        DataType::HttpRequest => TAG_REQUEST,
        DataType::HttpResponse => TAG_RESPONSE,
        DataType::RoutingId => TAG_ROUTING,
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

fn put_headers(out: &mut Vec<u8>, headers: &[(String, String)]) {
    put_u32(out, headers.len() as u32);
    for (name, value) in headers {
        put_bytes(out, name.as_bytes());
        put_bytes(out, value.as_bytes());
    }
}

pub fn encode_value_into(value: &Value, out: &mut Vec<u8>) {
    if value.is_null() {
        out.push(0);
        return;
    }
    out.push(1);
    out.push(tag_of(value));
    match value {
        Value::Null => unreachable!(),
        Value::String(s) => put_bytes(out, s.as_bytes()),
        Value::Int64(v) => out.extend_from_slice(&v.to_le_bytes()),
        Value::Float64(v) => out.extend_from_slice(&v.to_bits().to_le_bytes()),
        Value::Bool(v) => out.push(u8::from(*v)),
        Value::Binary(b) => put_bytes(out, b),
        Value::Array(items) => {
            put_u32(out, items.len() as u32);
            for item in items {
                encode_value_into(item, out);
            }
        }
        Value::HttpRequest(req) => encode_request_payload(req, out),
        Value::HttpResponse(resp) => encode_response_payload(resp, out),
        Value::RoutingId(id) => {
            put_u32(out, id.worker_id);
            out.extend_from_slice(&id.seq.to_le_bytes());
        }
    }
}

fn encode_request_payload(req: &HttpRequestData, out: &mut Vec<u8>) {
    put_bytes(out, req.method.as_bytes());
    put_bytes(out, req.uri.as_bytes());
    put_headers(out, &req.headers);
    put_bytes(out, &req.body);
}

pub(crate) fn encode_response_payload(resp: &HttpResponseData, out: &mut Vec<u8>) {
    out.extend_from_slice(&resp.status.to_le_bytes());
    put_bytes(out, resp.reason.as_bytes());
    put_headers(out, &resp.headers);
    put_bytes(out, &resp.body);
}

/// Canonical encoding of a single value; this is the key material for
/// [`hash_partition`](super::hash_partition).
pub fn encode_value(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    encode_value_into(value, &mut out);
    out
}

pub fn encode_row_into(row: &Row, out: &mut Vec<u8>) {
    let start = out.len();
    put_u32(out, 0);
    put_u32(out, row.len() as u32);
    for value in row.values() {
        encode_value_into(value, out);
    }
    let body_len = (out.len() - start - 4) as u32;
    out[start..start + 4].copy_from_slice(&body_len.to_le_bytes());
}

pub fn encode_row(row: &Row) -> Vec<u8> {
    let mut out = Vec::new();
    encode_row_into(row, &mut out);
    out
}

/// Decodes exactly one row occupying all of `bytes`.
pub fn decode_row(schema: &Schema, bytes: &[u8]) -> Result<Row, CodecError> {
    let mut reader = Reader::new(bytes);
    let row = reader.row(schema)?;
    if reader.remaining() != 0 {
        return Err(CodecError::Trailing(reader.remaining()));
    }
    Ok(row)
}

/// Cursor over an encoded buffer; frames embed several rows back to back.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn string(&mut self) -> Result<String, CodecError> {
        let offset = self.pos;
        let raw = self.bytes()?;
        std::str::from_utf8(raw)
            .map(str::to_string)
            .map_err(|_| CodecError::Utf8(offset))
    }

    fn headers(&mut self) -> Result<Vec<(String, String)>, CodecError> {
        let n = self.u32()? as usize;
        // Each header needs at least 8 bytes; reject absurd counts early.
        if n > self.remaining() / 8 {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n * 8,
                available: self.remaining(),
            });
        }
        let mut headers = Vec::with_capacity(n);
        for _ in 0..n {
            headers.push((self.string()?, self.string()?));
        }
        Ok(headers)
    }

    pub fn response_payload(&mut self) -> Result<HttpResponseData, CodecError> {
        let status = self.u16()?;
        let reason = self.string()?;
        let headers = self.headers()?;
        let body = self.bytes()?.to_vec();
        Ok(HttpResponseData {
            status,
            reason,
            headers,
            body,
        })
    }

    pub fn value(&mut self, field: &str, ty: &DataType) -> Result<Value, CodecError> {
        match self.u8()? {
            0 => return Ok(Value::Null),
            1 => {}
            other => return Err(CodecError::Presence(other)),
        }
        let tag = self.u8()?;
        if tag != expected_tag(ty) {
            return Err(CodecError::TypeMismatch {
                field: field.to_string(),
                expected: ty.to_string(),
                found: tag,
            });
        }
        Ok(match ty {
            DataType::String => Value::String(self.string()?),
            DataType::Int64 => Value::Int64(self.u64()? as i64),
            DataType::Float64 => Value::Float64(f64::from_bits(self.u64()?)),
            DataType::Bool => match self.u8()? {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                b => return Err(CodecError::Bool(b)),
            },
            DataType::Binary => Value::Binary(self.bytes()?.to_vec()),
            DataType::Array(inner) => {
                let n = self.u32()? as usize;
                if n > self.remaining() {
                    return Err(CodecError::Truncated {
                        offset: self.pos,
                        needed: n,
                        available: self.remaining(),
                    });
                }
                let mut items = Vec::with_capacity(n);
                for _ in 0..n {
                    items.push(self.value(field, inner)?);
                }
                Value::Array(items)
            }
            DataType::HttpRequest => {
                let method = self.string()?;
                let uri = self.string()?;
                let headers = self.headers()?;
                let body = self.bytes()?.to_vec();
                Value::HttpRequest(Box::new(HttpRequestData {
                    method,
                    uri,
                    headers,
                    body,
                }))
            }
            DataType::HttpResponse => Value::HttpResponse(Box::new(self.response_payload()?)),
            DataType::RoutingId => {
                let worker_id = self.u32()?;
                let seq = self.u64()?;
                Value::RoutingId(RoutingId { worker_id, seq })
            }
        })
    }

    pub fn row(&mut self, schema: &Schema) -> Result<Row, CodecError> {
        let declared = self.u32()? as usize;
        let start = self.pos;
        if self.remaining() < declared {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: declared,
                available: self.remaining(),
            });
        }
        let arity = self.u32()? as usize;
        if arity != schema.len() {
            return Err(CodecError::Arity {
                expected: schema.len(),
                found: arity,
            });
        }
        let mut values = Vec::with_capacity(arity);
        for field in schema.fields() {
            values.push(self.value(&field.name, &field.data_type)?);
        }
        let consumed = self.pos - start;
        if consumed != declared {
            return Err(CodecError::Length { declared, consumed });
        }
        Ok(Row::new(values))
    }
}
