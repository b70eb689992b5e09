//! Frame codec: `u32` big-endian payload length, `u8` message type, payload.
//! Multi-byte payload fields are big-endian; model parameters travel as
//! model files.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::fl::{RoundConfig, Weighting};
use crate::nn::{deserialize_params, serialize_params, ModelFileError, ModelParams};

pub const MAX_FRAME: u32 = 64 * 1024 * 1024;
pub const HEADER_LEN: usize = 5;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME}-byte cap")]
    Oversize(u32),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("{what}: payload ends after {got} bytes, needs {needed}")]
    ShortPayload {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("string field is not UTF-8")]
    BadUtf8,
    #[error("bad field: {0}")]
    BadField(String),
    #[error("model payload: {0}")]
    Model(#[from] ModelFileError),
    #[error("connection closed")]
    Closed,
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    JoinRequest {
        client_id: String,
        sample_count: u64,
        arch_checksum: u64,
    },
    JoinAccept {
        config: RoundConfig,
        /// Seed stream key assigned to the client.
        seed_stream: u64,
    },
    GlobalModel {
        round: u32,
        params: ModelParams,
    },
    LocalUpdate {
        round: u32,
        client_id: String,
        sample_count: u64,
        params: ModelParams,
        loss: f32,
    },
    RoundComplete {
        round: u32,
    },
    Shutdown,
    Error {
        code: u16,
        text: String,
    },
}

/// Error codes carried by [`Message::Error`].
pub mod code {
    pub const DUPLICATE_ID: u16 = 1;
    pub const ARCH_MISMATCH: u16 = 2;
    pub const RUN_FULL: u16 = 3;
    pub const BAD_REQUEST: u16 = 4;
    pub const ABORTED: u16 = 5;
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::JoinRequest { .. } => 1,
            Message::JoinAccept { .. } => 2,
            Message::GlobalModel { .. } => 3,
            Message::LocalUpdate { .. } => 4,
            Message::RoundComplete { .. } => 5,
            Message::Shutdown => 6,
            Message::Error { .. } => 7,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::JoinRequest { .. } => "JoinRequest",
            Message::JoinAccept { .. } => "JoinAccept",
            Message::GlobalModel { .. } => "GlobalModel",
            Message::LocalUpdate { .. } => "LocalUpdate",
            Message::RoundComplete { .. } => "RoundComplete",
            Message::Shutdown => "Shutdown",
            Message::Error { .. } => "Error",
        }
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    let b = s.as_bytes();
    let len = u16::try_from(b.len()).expect("string field longer than 65535 bytes");
    buf.extend_from_slice(&len.to_be_bytes());
    buf.extend_from_slice(b);
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u32).to_be_bytes());
    buf.extend_from_slice(b);
}

fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut p = Vec::new();
    match msg {
        Message::JoinRequest {
            client_id,
            sample_count,
            arch_checksum,
        } => {
            put_str(&mut p, client_id);
            p.extend_from_slice(&sample_count.to_be_bytes());
            p.extend_from_slice(&arch_checksum.to_be_bytes());
        }
        Message::JoinAccept {
            config,
            seed_stream,
        } => {
            p.extend_from_slice(&(config.rounds as u32).to_be_bytes());
            p.extend_from_slice(&(config.local_epochs as u32).to_be_bytes());
            p.extend_from_slice(&(config.batch_size as u32).to_be_bytes());
            p.extend_from_slice(&config.lr.to_bits().to_be_bytes());
            p.extend_from_slice(&config.seed.to_be_bytes());
            p.push(match config.weighting {
                Weighting::SampleCount => 0,
                Weighting::Uniform => 1,
            });
            p.extend_from_slice(&seed_stream.to_be_bytes());
        }
        Message::GlobalModel { round, params } => {
            p.extend_from_slice(&round.to_be_bytes());
            put_bytes(&mut p, &serialize_params(params));
        }
        Message::LocalUpdate {
            round,
            client_id,
            sample_count,
            params,
            loss,
        } => {
            p.extend_from_slice(&round.to_be_bytes());
            put_str(&mut p, client_id);
            p.extend_from_slice(&sample_count.to_be_bytes());
            put_bytes(&mut p, &serialize_params(params));
            p.extend_from_slice(&loss.to_bits().to_be_bytes());
        }
        Message::RoundComplete { round } => p.extend_from_slice(&round.to_be_bytes()),
        Message::Shutdown => {}
        Message::Error { code, text } => {
            p.extend_from_slice(&code.to_be_bytes());
            put_str(&mut p, text);
        }
    }
    p
}

/// One complete frame.
pub fn encode(msg: &Message) -> Vec<u8> {
    let payload = encode_payload(msg);
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.push(msg.type_byte());
    out.extend_from_slice(&payload);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::ShortPayload {
                what: self.what,
                needed: self.pos + n,
                got: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        self.array().map(u16::from_be_bytes)
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        self.array().map(u32::from_be_bytes)
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        self.array().map(u64::from_be_bytes)
    }

    fn string(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| WireError::BadUtf8)
    }

    fn model(&mut self) -> Result<ModelParams, WireError> {
        let n = self.u32()? as usize;
        Ok(deserialize_params(self.take(n)?)?)
    }

    fn finish(self) -> Result<(), WireError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }
}

fn positive(v: u32, what: &str) -> Result<usize, WireError> {
    if v == 0 {
        return Err(WireError::BadField(format!("{what} must be positive")));
    }
    Ok(v as usize)
}

/// Decodes the payload of a frame of type `ty`.
pub fn decode_payload(ty: u8, payload: &[u8]) -> Result<Message, WireError> {
    let what = match ty {
        1 => "JoinRequest",
        2 => "JoinAccept",
        3 => "GlobalModel",
        4 => "LocalUpdate",
        5 => "RoundComplete",
        6 => "Shutdown",
        7 => "Error",
        other => return Err(WireError::UnknownType(other)),
    };
    let mut c = Cursor {
        buf: payload,
        pos: 0,
        what,
    };
    let msg = match ty {
        1 => Message::JoinRequest {
            client_id: c.string()?,
            sample_count: c.u64()?,
            arch_checksum: c.u64()?,
        },
        2 => {
            let rounds = positive(c.u32()?, "rounds")?;
            let local_epochs = positive(c.u32()?, "local_epochs")?;
            let batch_size = positive(c.u32()?, "batch_size")?;
            let lr = f32::from_bits(c.u32()?);
            let seed = c.u64()?;
            let weighting = match c.u8()? {
                0 => Weighting::SampleCount,
                1 => Weighting::Uniform,
                w => return Err(WireError::BadField(format!("weighting {w}"))),
            };
            Message::JoinAccept {
                config: RoundConfig {
                    rounds,
                    local_epochs,
                    batch_size,
                    lr,
                    seed,
                    weighting,
                },
                seed_stream: c.u64()?,
            }
        }
        3 => Message::GlobalModel {
            round: c.u32()?,
            params: c.model()?,
        },
        4 => Message::LocalUpdate {
            round: c.u32()?,
            client_id: c.string()?,
            sample_count: c.u64()?,
            params: c.model()?,
            loss: f32::from_bits(c.u32()?),
        },
        5 => Message::RoundComplete { round: c.u32()? },
        6 => Message::Shutdown,
        _ => Message::Error {
            code: c.u16()?,
            text: c.string()?,
        },
    };
    c.finish()?;
    Ok(msg)
}

fn parse_header(h: [u8; HEADER_LEN]) -> Result<(u32, u8), WireError> {
    let len = u32::from_be_bytes([h[0], h[1], h[2], h[3]]);
    if len > MAX_FRAME {
        return Err(WireError::Oversize(len));
    }
    Ok((len, h[4]))
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    let header: [u8; HEADER_LEN] = bytes
        .get(..HEADER_LEN)
        .ok_or(WireError::ShortPayload {
            what: "frame header",
            needed: HEADER_LEN,
            got: bytes.len(),
        })?
        .try_into()
        .expect("length checked");
    let (len, ty) = parse_header(header)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < len as usize {
        return Err(WireError::ShortPayload {
            what: "frame",
            needed: HEADER_LEN + len as usize,
            got: bytes.len(),
        });
    }
    if body.len() > len as usize {
        return Err(WireError::TrailingBytes(body.len() - len as usize));
    }
    decode_payload(ty, body)
}

/// Reads one frame; returns the message and the bytes consumed. End of
/// stream before the first header byte is [`WireError::Closed`].
pub fn read_message<R: Read>(r: &mut R) -> Result<(Message, usize), WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(WireError::Closed),
            Ok(0) => {
                return Err(WireError::ShortPayload {
                    what: "frame header",
                    needed: HEADER_LEN,
                    got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    // the cap is enforced before the payload buffer exists
    let (len, ty) = parse_header(header)?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::ShortPayload {
            what: "frame",
            needed: len as usize,
            got: 0,
        },
        _ => WireError::Io(e),
    })?;
    Ok((decode_payload(ty, &payload)?, HEADER_LEN + len as usize))
}

/// Writes one frame and returns its size.
pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<usize, WireError> {
    let frame = encode(msg);
    w.write_all(&frame)?;
    w.flush()?;
    Ok(frame.len())
}
