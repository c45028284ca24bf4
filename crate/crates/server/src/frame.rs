//! Wire format for streamed audio chunks.
//!
//! Binary frames are `u32` big-endian length, then a 28-byte header
//! (`request_id u64`, `chunk_index u32`, `available_at_ms u64`,
//! `playback_ms u32`, `flags u32`, all big-endian), then the payload. The
//! payload is 16-bit mono PCM silence at 24 kHz covering `playback_ms`.

use bytes::{Buf, BufMut, Bytes, BytesMut};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER_LEN: usize = 28;
pub const LENGTH_PREFIX: usize = 4;
/// Refuse frames above this size when decoding.
pub const MAX_FRAME: usize = 16 << 20;

pub const FLAG_FINAL: u32 = 1;
/// The stream was cut short (client too slow, or a server failure).
pub const FLAG_ERROR: u32 = 2;

/// Bytes of 24 kHz 16-bit mono silence lasting `playback_ms`.
pub fn payload_len(playback_ms: u32) -> usize {
    let bytes = u64::from(playback_ms) * 24_000 * 2 / 1000;
    (bytes & !1) as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkFrame {
    pub request_id: u64,
    pub chunk_index: u32,
    /// Server clock, milliseconds since the service started.
    pub available_at_ms: u64,
    pub playback_ms: u32,
    pub flags: u32,
    pub payload: Bytes,
}

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("frame length {0} is shorter than the {HEADER_LEN}-byte header")]
    Short(usize),
    #[error("frame length {0} exceeds the limit")]
    TooLarge(usize),
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("malformed JSON frame: {0}")]
    Json(String),
}

impl ChunkFrame {
    /// An audio frame with a silent payload of the right size.
    pub fn audio(request_id: u64, chunk_index: u32, available_at_ms: u64, playback_ms: u32, is_final: bool) -> Self {
        ChunkFrame {
            request_id,
            chunk_index,
            available_at_ms,
            playback_ms,
            flags: if is_final { FLAG_FINAL } else { 0 },
            payload: Bytes::from(vec![0u8; payload_len(playback_ms)]),
        }
    }

    /// Terminates a stream that could not be completed.
    pub fn error(request_id: u64, chunk_index: u32, available_at_ms: u64) -> Self {
        ChunkFrame {
            request_id,
            chunk_index,
            available_at_ms,
            playback_ms: 0,
            flags: FLAG_FINAL | FLAG_ERROR,
            payload: Bytes::new(),
        }
    }

    pub fn is_final(&self) -> bool {
        self.flags & FLAG_FINAL != 0
    }

    pub fn is_error(&self) -> bool {
        self.flags & FLAG_ERROR != 0
    }

    pub fn encode(&self) -> Bytes {
        let len = HEADER_LEN + self.payload.len();
        let mut buf = BytesMut::with_capacity(LENGTH_PREFIX + len);
        buf.put_u32(len as u32);
        buf.put_u64(self.request_id);
        buf.put_u32(self.chunk_index);
        buf.put_u64(self.available_at_ms);
        buf.put_u32(self.playback_ms);
        buf.put_u32(self.flags);
        buf.put_slice(&self.payload);
        buf.freeze()
    }

    /// One JSON line; the payload is reported by size only.
    pub fn encode_json(&self) -> Bytes {
        let mut line = serde_json::to_vec(&JsonFrame::from(self)).expect("serializable");
        line.push(b'\n');
        Bytes::from(line)
    }
}

/// Debug representation used by the JSON-lines mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonFrame {
    pub request_id: u64,
    pub chunk_index: u32,
    pub available_at_ms: u64,
    pub playback_ms: u32,
    pub is_final: bool,
    pub error: bool,
    pub payload_bytes: usize,
}

impl From<&ChunkFrame> for JsonFrame {
    fn from(f: &ChunkFrame) -> Self {
        JsonFrame {
            request_id: f.request_id,
            chunk_index: f.chunk_index,
            available_at_ms: f.available_at_ms,
            playback_ms: f.playback_ms,
            is_final: f.is_final(),
            error: f.is_error(),
            payload_bytes: f.payload.len(),
        }
    }
}

impl From<JsonFrame> for ChunkFrame {
    fn from(j: JsonFrame) -> Self {
        let mut flags = 0;
        if j.is_final {
            flags |= FLAG_FINAL;
        }
        if j.error {
            flags |= FLAG_ERROR;
        }
        ChunkFrame {
            request_id: j.request_id,
            chunk_index: j.chunk_index,
            available_at_ms: j.available_at_ms,
            playback_ms: j.playback_ms,
            flags,
            payload: Bytes::from(vec![0u8; j.payload_bytes]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireFormat {
    Binary,
    JsonLines,
}

impl WireFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            WireFormat::Binary => "application/octet-stream",
            WireFormat::JsonLines => "application/x-ndjson",
        }
    }

    pub fn from_content_type(ct: &str) -> Self {
        if ct.starts_with("application/x-ndjson") {
            WireFormat::JsonLines
        } else {
            WireFormat::Binary
        }
    }

    pub fn encode(self, frame: &ChunkFrame) -> Bytes {
        match self {
            WireFormat::Binary => frame.encode(),
            WireFormat::JsonLines => frame.encode_json(),
        }
    }
}

/// Incremental decoder: feed bytes as they arrive, take complete frames.
#[derive(Debug)]
pub struct FrameDecoder {
    format: WireFormat,
    buf: BytesMut,
}

impl FrameDecoder {
    pub fn new(format: WireFormat) -> Self {
        FrameDecoder {
            format,
            buf: BytesMut::new(),
        }
    }

    pub fn push(&mut self, data: &[u8]) {
        self.buf.extend_from_slice(data);
    }

    /// The next complete frame, if buffered.
    pub fn next_frame(&mut self) -> Result<Option<ChunkFrame>, FrameError> {
        match self.format {
            WireFormat::Binary => self.next_binary(),
            WireFormat::JsonLines => self.next_json(),
        }
    }

    fn next_binary(&mut self) -> Result<Option<ChunkFrame>, FrameError> {
        if self.buf.len() < LENGTH_PREFIX {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().expect("4 bytes")) as usize;
        if len < HEADER_LEN {
            return Err(FrameError::Short(len));
        }
        if len > MAX_FRAME {
            return Err(FrameError::TooLarge(len));
        }
        if self.buf.len() < LENGTH_PREFIX + len {
            return Ok(None);
        }
        self.buf.advance(LENGTH_PREFIX);
        let mut frame = self.buf.split_to(len);
        let request_id = frame.get_u64();
        let chunk_index = frame.get_u32();
        let available_at_ms = frame.get_u64();
        let playback_ms = frame.get_u32();
        let flags = frame.get_u32();
        Ok(Some(ChunkFrame {
            request_id,
            chunk_index,
            available_at_ms,
            playback_ms,
            flags,
            payload: frame.freeze(),
        }))
    }

    fn next_json(&mut self) -> Result<Option<ChunkFrame>, FrameError> {
        let Some(pos) = self.buf.iter().position(|&b| b == b'\n') else {
            if self.buf.len() > MAX_FRAME {
                return Err(FrameError::TooLarge(self.buf.len()));
            }
            return Ok(None);
        };
        let line = self.buf.split_to(pos + 1);
        let j: JsonFrame =
            serde_json::from_slice(&line[..pos]).map_err(|e| FrameError::Json(e.to_string()))?;
        Ok(Some(j.into()))
    }

    /// Call at end of stream: leftover bytes mean a cut-off frame.
    pub fn finish(&self) -> Result<(), FrameError> {
        let clean = match self.format {
            WireFormat::Binary => self.buf.is_empty(),
            WireFormat::JsonLines => self.buf.iter().all(u8::is_ascii_whitespace),
        };
        if clean {
            Ok(())
        } else {
            Err(FrameError::Truncated)
        }
    }
}

/// Decodes a complete byte stream.
pub fn decode_all(format: WireFormat, data: &[u8]) -> Result<Vec<ChunkFrame>, FrameError> {
    let mut d = FrameDecoder::new(format);
    d.push(data);
    let mut out = Vec::new();
    while let Some(f) = d.next_frame()? {
        out.push(f);
    }
    d.finish()?;
    Ok(out)
}
