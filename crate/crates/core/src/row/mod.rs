//! Row data model shared by every stage: schemas, values, HTTP message types,
//! the canonical binary codec and key hashing.

mod codec;
mod hash;
mod types;
mod validate;

use thiserror::Error;

pub use codec::{
    decode_row, encode_row, encode_row_into, encode_value, encode_value_into, CodecError, Reader,
};
pub(crate) use codec::encode_response_payload;
pub use hash::{fnv1a64, hash_partition, key_bytes};
pub use types::{
    canonical_reason, DataType, Field, Headers, HttpRequestData, HttpResponseData, RoutingId, Row,
    Schema, Value,
};
pub use validate::{validate_row, Violation};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RowError {
    #[error("invalid data type {0:?}")]
    InvalidType(String),
    #[error("duplicate field name {0:?}")]
    DuplicateField(String),
}

/// Encodes an HTTP response payload (no presence flag or tag), as carried by
/// routing frames.
pub fn encode_response(resp: &HttpResponseData) -> Vec<u8> {
    let mut out = Vec::new();
    encode_response_payload(resp, &mut out);
    out
}

pub fn decode_response(bytes: &[u8]) -> Result<HttpResponseData, CodecError> {
    let mut reader = Reader::new(bytes);
    let resp = reader.response_payload()?;
    if reader.remaining() != 0 {
        return Err(CodecError::Trailing(reader.remaining()));
    }
    Ok(resp)
}
