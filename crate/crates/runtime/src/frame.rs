//! Internal wire format shared by shuffle, routing, broadcast and deploy
//! traffic. All integers are little-endian; `str` and `bytes` are a `u32`
//! length followed by that many bytes.
//!
//! ```text
//! frame      := len:u32 version:u8 kind:u8 body     len counts version..end
//! version    := 0x01
//!
//! kind 1 SHUFFLE    pipeline:str exchange:u64 stage:u32 partition:u32
//!                   partitions:u32 source:u32 count:u32 row{count}
//! kind 2 RESPONSE   worker:u32 seq:u64 response          (row codec payload)
//! kind 3 ACK        correlation:u64 ok:u8 digest:[u8;32] message:str
//! kind 4 BROADCAST  correlation:u64 table:str schema:str digest:[u8;32]
//!                   count:u32 rows:bytes
//! kind 5 DEPLOY     correlation:u64 document:bytes       (JSON)
//! ```
//!
//! Rows use the row codec, which is self-delimiting, so a shuffle frame's
//! rows are simply concatenated. `exchange` 0 marks a streaming shuffle whose
//! rows continue through the pipeline on arrival; other values name a
//! barrier exchange.

use flowserve_core::row::{
    decode_response, encode_response, encode_row_into, CodecError, HttpResponseData, Reader,
    RoutingId, Row, Schema,
};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

pub const WIRE_VERSION: u8 = 1;
pub const MAX_FRAME_LEN: usize = 256 << 20;

pub const KIND_SHUFFLE: u8 = 1;
pub const KIND_RESPONSE: u8 = 2;
pub const KIND_ACK: u8 = 3;
pub const KIND_BROADCAST: u8 = 4;
pub const KIND_DEPLOY: u8 = 5;

pub type Digest = [u8; 32];

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported wire version {0}")]
    Version(u8),
    #[error("unknown frame kind {0}")]
    Kind(u8),
    #[error("frame length {0} out of range")]
    Length(usize),
    #[error("malformed frame body: {0}")]
    Body(#[from] CodecError),
    #[error("{0} trailing bytes in frame body")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleFrame {
    pub pipeline_id: String,
    pub exchange_id: u64,
    pub stage_index: u32,
    pub target_partition: u32,
    pub partition_count: u32,
    pub source_worker: u32,
    pub row_count: u32,
    /// Encoded rows, back to back.
    pub rows: Vec<u8>,
}

impl ShuffleFrame {
    pub fn encode_rows(rows: &[Row]) -> Vec<u8> {
        let mut out = Vec::new();
        for row in rows {
            encode_row_into(row, &mut out);
        }
        out
    }

    pub fn decode_rows(&self, schema: &Schema) -> Result<Vec<Row>, CodecError> {
        decode_rows(&self.rows, self.row_count, schema)
    }
}

pub fn decode_rows(bytes: &[u8], count: u32, schema: &Schema) -> Result<Vec<Row>, CodecError> {
    let mut reader = Reader::new(bytes);
    let mut rows = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        rows.push(reader.row(schema)?);
    }
    if reader.remaining() != 0 {
        return Err(CodecError::Trailing(reader.remaining()));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Shuffle(ShuffleFrame),
    Response {
        id: RoutingId,
        response: HttpResponseData,
    },
    Ack {
        correlation: u64,
        ok: bool,
        digest: Digest,
        message: String,
    },
    Broadcast {
        correlation: u64,
        table_id: String,
        schema_json: String,
        digest: Digest,
        row_count: u32,
        rows: Vec<u8>,
    },
    Deploy {
        correlation: u64,
        document: Vec<u8>,
    },
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

impl Frame {
    pub fn kind(&self) -> u8 {
        match self {
            Frame::Shuffle(_) => KIND_SHUFFLE,
            Frame::Response { .. } => KIND_RESPONSE,
            Frame::Ack { .. } => KIND_ACK,
            Frame::Broadcast { .. } => KIND_BROADCAST,
            Frame::Deploy { .. } => KIND_DEPLOY,
        }
    }

    /// Full frame including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0u8; 4];
        out.push(WIRE_VERSION);
        out.push(self.kind());
        match self {
            Frame::Shuffle(s) => {
                put_bytes(&mut out, s.pipeline_id.as_bytes());
                put_u64(&mut out, s.exchange_id);
                put_u32(&mut out, s.stage_index);
                put_u32(&mut out, s.target_partition);
                put_u32(&mut out, s.partition_count);
                put_u32(&mut out, s.source_worker);
                put_u32(&mut out, s.row_count);
                out.extend_from_slice(&s.rows);
            }
            Frame::Response { id, response } => {
                put_u32(&mut out, id.worker_id);
                put_u64(&mut out, id.seq);
                out.extend_from_slice(&encode_response(response));
            }
            Frame::Ack {
                correlation,
                ok,
                digest,
                message,
            } => {
                put_u64(&mut out, *correlation);
                out.push(*ok as u8);
                out.extend_from_slice(digest);
                put_bytes(&mut out, message.as_bytes());
            }
            Frame::Broadcast {
                correlation,
                table_id,
                schema_json,
                digest,
                row_count,
                rows,
            } => {
                put_u64(&mut out, *correlation);
                put_bytes(&mut out, table_id.as_bytes());
                put_bytes(&mut out, schema_json.as_bytes());
                out.extend_from_slice(digest);
                put_u32(&mut out, *row_count);
                put_bytes(&mut out, rows);
            }
            Frame::Deploy {
                correlation,
                document,
            } => {
                put_u64(&mut out, *correlation);
                put_bytes(&mut out, document);
            }
        }
        let len = (out.len() - 4) as u32;
        out[..4].copy_from_slice(&len.to_le_bytes());
        out
    }

    /// Decodes the part after the length prefix.
    pub fn decode_body(buf: &[u8]) -> Result<Frame, FrameError> {
        let mut r = Reader::new(buf);
        let version = r.u8()?;
        if version != WIRE_VERSION {
            return Err(FrameError::Version(version));
        }
        let kind = r.u8()?;
        let frame = match kind {
            KIND_SHUFFLE => {
                let pipeline_id = r.string()?;
                let exchange_id = r.u64()?;
                let stage_index = r.u32()?;
                let target_partition = r.u32()?;
                let partition_count = r.u32()?;
                let source_worker = r.u32()?;
                let row_count = r.u32()?;
                let rows = r.take(r.remaining())?.to_vec();
                Frame::Shuffle(ShuffleFrame {
                    pipeline_id,
                    exchange_id,
                    stage_index,
                    target_partition,
                    partition_count,
                    source_worker,
                    row_count,
                    rows,
                })
            }
            KIND_RESPONSE => {
                let worker_id = r.u32()?;
                let seq = r.u64()?;
                let response = decode_response(r.take(r.remaining())?)?;
                Frame::Response {
                    id: RoutingId::new(worker_id, seq),
                    response,
                }
            }
            KIND_ACK => {
                let correlation = r.u64()?;
                let ok = r.u8()? != 0;
                let digest = r.take(32)?.try_into().unwrap();
                let message = r.string()?;
                Frame::Ack {
                    correlation,
                    ok,
                    digest,
                    message,
                }
            }
            KIND_BROADCAST => {
                let correlation = r.u64()?;
                let table_id = r.string()?;
                let schema_json = r.string()?;
                let digest = r.take(32)?.try_into().unwrap();
                let row_count = r.u32()?;
                let rows = r.bytes()?.to_vec();
                Frame::Broadcast {
                    correlation,
                    table_id,
                    schema_json,
                    digest,
                    row_count,
                    rows,
                }
            }
            KIND_DEPLOY => {
                let correlation = r.u64()?;
                let document = r.bytes()?.to_vec();
                Frame::Deploy {
                    correlation,
                    document,
                }
            }
            other => return Err(FrameError::Kind(other)),
        };
        if r.remaining() != 0 {
            return Err(FrameError::Trailing(r.remaining()));
        }
        Ok(frame)
    }
}

/// Reads one frame; `Ok(None)` on a clean end of stream between frames.
pub async fn read_frame<R: AsyncRead + Unpin>(reader: &mut R) -> Result<Option<Frame>, FrameError> {
    let mut len = [0u8; 4];
    match reader.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if !(2..=MAX_FRAME_LEN).contains(&len) {
        return Err(FrameError::Length(len));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).await?;
    Frame::decode_body(&body).map(Some)
}

pub async fn write_frame<W: AsyncWrite + Unpin>(writer: &mut W, frame: &Frame) -> std::io::Result<()> {
    writer.write_all(&frame.encode()).await?;
    writer.flush().await
}
