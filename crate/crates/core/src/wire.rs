//! Binary framing for protocol messages.
//!
//! ```text
//! u32 BE  length of everything after this field
//! u8      message tag
//! u64 BE  query id
//! ...     payload
//! ```
//!
//! Tags are raw 32 bytes; tag sets are a `u32` count followed by the tags.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::psi::{EncryptedId, GroupToken};

pub const PROTOCOL_VERSION: u8 = 0x01;
pub const MAX_FRAME_LEN: usize = 1 << 30;

const TAG_HELLO: u8 = 0x01;
const TAG_OPEN: u8 = 0x10;
const TAG_SUBMIT_IDS: u8 = 0x11;
const TAG_SUBMIT_GROUPS: u8 = 0x12;
const TAG_INTERSECTION: u8 = 0x13;
const TAG_COMPUTED_COUNT: u8 = 0x14;
const TAG_VALIDATED_COUNT: u8 = 0x15;
const TAG_ERROR: u8 = 0x7f;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Role {
    /// The task party's orchestrator, speaking for all parties.
    Parties = 0,
    Computation = 1,
    Validation = 2,
}

impl TryFrom<u8> for Role {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            0 => Ok(Role::Parties),
            1 => Ok(Role::Computation),
            2 => Ok(Role::Validation),
            other => Err(Error::Protocol(format!("unknown role byte {other:#04x}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Hello { version: u8, role: Role },
    /// Announces a query and how many parties will submit to it.
    Open { participants: u32, q: u32 },
    SubmitIds { party: u32, ids: Vec<EncryptedId> },
    SubmitGroups { party: u32, groups: Vec<(GroupToken, Vec<EncryptedId>)> },
    Intersection { ids: Vec<EncryptedId> },
    ComputedCount { n_c: i64 },
    ValidatedCount { n_v: i64 },
    Error { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub query_id: u64,
    pub message: Message,
}

impl Frame {
    pub fn new(query_id: u64, message: Message) -> Self {
        Self { query_id, message }
    }
}

fn put_tags(out: &mut Vec<u8>, tags: &[EncryptedId]) {
    out.extend_from_slice(&(tags.len() as u32).to_be_bytes());
    for tag in tags {
        out.extend_from_slice(&tag.0);
    }
}

/// Serializes a frame, length prefix included.
pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut body = Vec::with_capacity(64);
    let tag = match &frame.message {
        Message::Hello { .. } => TAG_HELLO,
        Message::Open { .. } => TAG_OPEN,
        Message::SubmitIds { .. } => TAG_SUBMIT_IDS,
        Message::SubmitGroups { .. } => TAG_SUBMIT_GROUPS,
        Message::Intersection { .. } => TAG_INTERSECTION,
        Message::ComputedCount { .. } => TAG_COMPUTED_COUNT,
        Message::ValidatedCount { .. } => TAG_VALIDATED_COUNT,
        Message::Error { .. } => TAG_ERROR,
    };
    body.push(tag);
    body.extend_from_slice(&frame.query_id.to_be_bytes());
    match &frame.message {
        Message::Hello { version, role } => {
            body.push(*version);
            body.push(*role as u8);
        }
        Message::Open { participants, q } => {
            body.extend_from_slice(&participants.to_be_bytes());
            body.extend_from_slice(&q.to_be_bytes());
        }
        Message::SubmitIds { party, ids } => {
            body.extend_from_slice(&party.to_be_bytes());
            put_tags(&mut body, ids);
        }
        Message::SubmitGroups { party, groups } => {
            body.extend_from_slice(&party.to_be_bytes());
            body.extend_from_slice(&(groups.len() as u32).to_be_bytes());
            for (token, tags) in groups {
                body.extend_from_slice(&token.0);
                put_tags(&mut body, tags);
            }
        }
        Message::Intersection { ids } => put_tags(&mut body, ids),
        Message::ComputedCount { n_c } => body.extend_from_slice(&n_c.to_be_bytes()),
        Message::ValidatedCount { n_v } => body.extend_from_slice(&n_v.to_be_bytes()),
        Message::Error { reason } => {
            body.extend_from_slice(&(reason.len() as u32).to_be_bytes());
            body.extend_from_slice(reason.as_bytes());
        }
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Protocol(format!("frame truncated: wanted {n} bytes, {} left", self.buf.len())));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes32(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn count(&mut self, item_size: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(item_size) > self.buf.len() {
            return Err(Error::Protocol(format!("count {n} exceeds the remaining frame")));
        }
        Ok(n)
    }

    fn tags(&mut self) -> Result<Vec<EncryptedId>> {
        let n = self.count(32)?;
        (0..n).map(|_| self.bytes32().map(EncryptedId)).collect()
    }
}

/// Parses one frame body (everything after the length prefix).
pub fn decode_body(body: &[u8]) -> Result<Frame> {
    let mut cur = Cursor { buf: body };
    let tag = cur.u8()?;
    let query_id = cur.u64()?;
    let message = match tag {
        TAG_HELLO => Message::Hello { version: cur.u8()?, role: Role::try_from(cur.u8()?)? },
        TAG_OPEN => Message::Open { participants: cur.u32()?, q: cur.u32()? },
        TAG_SUBMIT_IDS => Message::SubmitIds { party: cur.u32()?, ids: cur.tags()? },
        TAG_SUBMIT_GROUPS => {
            let party = cur.u32()?;
            let n = cur.count(36)?;
            let mut groups = Vec::with_capacity(n);
            for _ in 0..n {
                let token = GroupToken(cur.bytes32()?);
                groups.push((token, cur.tags()?));
            }
            Message::SubmitGroups { party, groups }
        }
        TAG_INTERSECTION => Message::Intersection { ids: cur.tags()? },
        TAG_COMPUTED_COUNT => Message::ComputedCount { n_c: cur.i64()? },
        TAG_VALIDATED_COUNT => Message::ValidatedCount { n_v: cur.i64()? },
        TAG_ERROR => {
            let n = cur.count(1)?;
            let reason = String::from_utf8(cur.take(n)?.to_vec())
                .map_err(|_| Error::Protocol("error reason is not UTF-8".into()))?;
            Message::Error { reason }
        }
        other => return Err(Error::Protocol(format!("unknown message tag {other:#04x}"))),
    };
    if !cur.buf.is_empty() {
        return Err(Error::Protocol(format!("{} trailing bytes in frame", cur.buf.len())));
    }
    Ok(Frame { query_id, message })
}

/// Parses a complete frame, length prefix included.
pub fn decode(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() < 4 {
        return Err(Error::Protocol("frame shorter than its length prefix".into()));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() - 4 != len {
        return Err(Error::Protocol(format!("length prefix says {len}, frame holds {}", bytes.len() - 4)));
    }
    decode_body(&bytes[4..])
}

pub fn write_frame(writer: &mut impl Write, frame: &Frame) -> Result<()> {
    writer.write_all(&encode(frame))?;
    writer.flush()?;
    Ok(())
}

/// Reads the next frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(reader: &mut impl Read) -> Result<Option<Frame>> {
    let mut prefix = [0u8; 4];
    match reader.read_exact(&mut prefix) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds the limit")));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    decode_body(&body).map(Some)
}
