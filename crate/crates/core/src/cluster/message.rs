//! Messages exchanged between execution units and their wire framing.
//!
//! A frame is a 4-byte big-endian length followed by a 24-byte header and
//! an optional payload:
//!
//! | bytes | field |
//! |-------|-------|
//! | 1 | kind |
//! | 1 | source role (high nibble), destination role (low nibble) |
//! | 2+2 | source group, unit |
//! | 2+2 | destination group, unit |
//! | 4 | slice or bridge id |
//! | 4 | version or iteration |
//! | 4 | payload length |
//! | 2 | reserved (update weight, get mode) |
//!
//! Header integers are big-endian. The payload is `rows` and `cols` as
//! big-endian `u32` followed by the values as little-endian `f64`.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Blob;

const HEADER_LEN: usize = 24;
/// Largest frame accepted from a peer (256 MiB).
const MAX_FRAME: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Worker = 0,
    Server = 1,
    Driver = 2,
    Stub = 3,
}

impl Role {
    fn from_nibble(n: u8) -> Result<Role> {
        Ok(match n {
            0 => Role::Worker,
            1 => Role::Server,
            2 => Role::Driver,
            3 => Role::Stub,
            other => return Err(Error::protocol(format!("unknown role {other}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Get = 0,
    Put = 1,
    Update = 2,
    Response = 3,
    Sync = 4,
    Data = 5,
    Stop = 6,
}

impl Kind {
    fn from_byte(b: u8) -> Result<Kind> {
        Ok(match b {
            0 => Kind::Get,
            1 => Kind::Put,
            2 => Kind::Update,
            3 => Kind::Response,
            4 => Kind::Sync,
            5 => Kind::Data,
            6 => Kind::Stop,
            other => return Err(Error::protocol(format!("unknown message kind {other}"))),
        })
    }
}

/// Address of an execution unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Addr {
    pub role: Role,
    pub group: u16,
    pub unit: u16,
}

impl Addr {
    pub fn worker(group: usize, unit: usize) -> Addr {
        Addr {
            role: Role::Worker,
            group: group as u16,
            unit: unit as u16,
        }
    }

    pub fn server(group: usize, unit: usize) -> Addr {
        Addr {
            role: Role::Server,
            group: group as u16,
            unit: unit as u16,
        }
    }

    pub const DRIVER: Addr = Addr {
        role: Role::Driver,
        group: 0,
        unit: 0,
    };

    pub const STUB: Addr = Addr {
        role: Role::Stub,
        group: 0,
        unit: 0,
    };
}

/// `reserved` value of a GET asking for the total version rather than the
/// requesting group's.
pub const GET_TOTAL: u16 = 1;
/// `reserved` value of a STOP that aborts the job.
pub const STOP_ABORT: u16 = 1;
/// Set in the id of DATA messages that carry gradients back through a bridge.
pub const BACKWARD_BIT: u32 = 0x8000_0000;

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: Kind,
    pub src: Addr,
    pub dst: Addr,
    /// Slice id, or bridge id for DATA.
    pub id: u32,
    /// Iteration for UPDATE and GET, value version for RESPONSE and PUT.
    pub version: u32,
    pub reserved: u16,
    pub payload: Option<Blob>,
}

impl Message {
    pub fn new(kind: Kind, src: Addr, dst: Addr, id: u32, version: u32) -> Message {
        Message {
            kind,
            src,
            dst,
            id,
            version,
            reserved: 0,
            payload: None,
        }
    }

    pub fn with_payload(mut self, blob: Blob) -> Message {
        self.payload = Some(blob);
        self
    }

    pub fn with_reserved(mut self, reserved: u16) -> Message {
        self.reserved = reserved;
        self
    }

    pub fn stop(src: Addr, dst: Addr) -> Message {
        Message::new(Kind::Stop, src, dst, 0, 0)
    }

    pub fn is_abort(&self) -> bool {
        self.kind == Kind::Stop && self.reserved == STOP_ABORT
    }

    /// Takes the payload, failing if the message carries none.
    pub fn take_payload(&mut self) -> Result<Blob> {
        self.payload
            .take()
            .ok_or_else(|| Error::protocol(format!("{:?} from {:?} carries no payload", self.kind, self.src)))
    }

    /// Encodes the message as one frame, length prefix included.
    pub fn encode(&self) -> Vec<u8> {
        let payload_len = self.payload.as_ref().map_or(0, |b| 8 + 8 * b.len());
        let mut out = Vec::with_capacity(4 + HEADER_LEN + payload_len);
        out.extend_from_slice(&((HEADER_LEN + payload_len) as u32).to_be_bytes());
        out.push(self.kind as u8);
        out.push(((self.src.role as u8) << 4) | self.dst.role as u8);
        for v in [self.src.group, self.src.unit, self.dst.group, self.dst.unit] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.id.to_be_bytes());
        out.extend_from_slice(&self.version.to_be_bytes());
        out.extend_from_slice(&(payload_len as u32).to_be_bytes());
        out.extend_from_slice(&self.reserved.to_be_bytes());
        if let Some(b) = &self.payload {
            out.extend_from_slice(&(b.rows() as u32).to_be_bytes());
            out.extend_from_slice(&(b.cols() as u32).to_be_bytes());
            for v in b.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a frame body (header and payload, without the length prefix).
    pub fn decode(body: &[u8]) -> Result<Message> {
        if body.len() < HEADER_LEN {
            return Err(Error::protocol(format!("frame of {} bytes is shorter than the header", body.len())));
        }
        let u16_at = |i: usize| u16::from_be_bytes([body[i], body[i + 1]]);
        let u32_at = |i: usize| u32::from_be_bytes(body[i..i + 4].try_into().expect("four bytes"));
        let kind = Kind::from_byte(body[0])?;
        let src = Addr {
            role: Role::from_nibble(body[1] >> 4)?,
            group: u16_at(2),
            unit: u16_at(4),
        };
        let dst = Addr {
            role: Role::from_nibble(body[1] & 0x0f)?,
            group: u16_at(6),
            unit: u16_at(8),
        };
        let id = u32_at(10);
        let version = u32_at(14);
        let payload_len = u32_at(18) as usize;
        let reserved = u16_at(22);
        let rest = &body[HEADER_LEN..];
        if rest.len() != payload_len {
            return Err(Error::protocol(format!(
                "header announces {payload_len} payload bytes, frame has {}",
                rest.len()
            )));
        }
        let payload = if payload_len == 0 {
            None
        } else {
            if payload_len < 8 {
                return Err(Error::protocol("payload too short for its shape"));
            }
            let rows = u32::from_be_bytes(rest[0..4].try_into().expect("four bytes")) as usize;
            let cols = u32::from_be_bytes(rest[4..8].try_into().expect("four bytes")) as usize;
            let values = &rest[8..];
            if rows.checked_mul(cols).and_then(|n| n.checked_mul(8)) != Some(values.len()) {
                return Err(Error::protocol(format!(
                    "payload shape {rows}x{cols} does not match {} value bytes",
                    values.len()
                )));
            }
            let data = values
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            Some(Blob::from_vec(rows, cols, data)?)
        };
        Ok(Message {
            kind,
            src,
            dst,
            id,
            version,
            reserved,
            payload,
        })
    }
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> io::Result<()> {
    w.write_all(&msg.encode())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::protocol(format!("frame of {len} bytes exceeds the limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Message::decode(&body).map(Some)
}
