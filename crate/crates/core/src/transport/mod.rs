//! Framed message transport between the three roles.
//!
//! A frame is a 4-byte big-endian length (covering everything after it), a
//! one-byte message type, a 16-byte session id and the payload. The same
//! framing runs over in-memory pipes and TCP streams.

pub mod codec;
mod endpoint;
mod handshake;
pub mod loopback;
pub mod tcp;

pub use endpoint::{Endpoint, LinkStats, Transcript};
pub use handshake::{handshake, PROTOCOL_VERSION};

use std::fmt;
use std::io::{ErrorKind, Read};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest accepted frame, measured like the length field.
pub const MAX_FRAME_LEN: usize = 64 << 20;
/// Bytes of type tag plus session id.
pub const FRAME_OVERHEAD: usize = 1 + 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Csp,
    Owner,
    Analyst,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Csp => 1,
            Role::Owner => 2,
            Role::Analyst => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Role::Csp),
            2 => Some(Role::Owner),
            3 => Some(Role::Analyst),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Csp => "csp",
            Role::Owner => "do",
            Role::Analyst => "da",
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct SessionId(pub [u8; 16]);

impl SessionId {
    pub const CONTROL: SessionId = SessionId([0; 16]);

    pub fn random<R: RngCore>(rng: &mut R) -> Self {
        let mut id = [0u8; 16];
        rng.fill_bytes(&mut id);
        SessionId(id)
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.len() != 32 || !s.is_ascii() {
            return Err(Error::Usage(format!("session id must be 32 hex digits: {s:?}")));
        }
        let mut id = [0u8; 16];
        for (i, byte) in id.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Usage(format!("invalid session id {s:?}")))?;
        }
        Ok(SessionId(id))
    }
}

impl fmt::Debug for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionId({})", self.to_hex())
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

macro_rules! message_types {
    ($($name:ident = $code:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum MessageType {
            $($name),*
        }

        impl MessageType {
            pub const ALL: &'static [MessageType] = &[$(MessageType::$name),*];

            pub fn code(self) -> u8 {
                match self {
                    $(MessageType::$name => $code),*
                }
            }

            pub fn from_code(code: u8) -> Option<Self> {
                match code {
                    $($code => Some(MessageType::$name),)*
                    _ => None,
                }
            }
        }
    };
}

message_types! {
    Handshake = 0x01,
    SessionOpen = 0x02,
    SessionClose = 0x03,
    RandomizedNode = 0x10,
    RandomOffset = 0x11,
    GcPayload = 0x12,
    OtMsg = 0x13,
    GcOutput = 0x14,
    Shares = 0x15,
    IntegrityProof = 0x16,
    UidProbe = 0x17,
    OrderResult = 0x20,
    UploadRequest = 0x21,
    CipherUpload = 0x22,
    MinmaxTriple = 0x30,
    MinmaxRandoms = 0x31,
    MinmaxSelected = 0x32,
    Query = 0x40,
    QueryResult = 0x41,
    Cleanup = 0x42,
    CleanupAck = 0x43,
    Abort = 0x7f,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MessageType,
    pub session: SessionId,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MessageType, session: SessionId, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            session,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 + FRAME_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let len = FRAME_OVERHEAD + self.payload.len();
        if len > MAX_FRAME_LEN {
            return Err(Error::Framing(format!("frame of {len} bytes exceeds limit")));
        }
        let mut out = Vec::with_capacity(4 + len);
        out.extend_from_slice(&(len as u32).to_be_bytes());
        out.push(self.msg_type.code());
        out.extend_from_slice(&self.session.0);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Reads one frame. `Ok(None)` means the stream ended cleanly between
    /// frames; ending inside a frame is a framing error.
    pub fn read_from<R: Read + ?Sized>(reader: &mut R) -> Result<Option<Frame>> {
        let mut len = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match reader.read(&mut len[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(Error::Framing("truncated length prefix".into())),
                Ok(n) => got += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let len = u32::from_be_bytes(len) as usize;
        if len < FRAME_OVERHEAD {
            return Err(Error::Framing(format!("frame length {len} shorter than header")));
        }
        if len > MAX_FRAME_LEN {
            return Err(Error::Framing(format!("frame length {len} exceeds limit")));
        }
        let mut body = vec![0u8; len];
        reader.read_exact(&mut body).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => Error::Framing("truncated frame".into()),
            _ => Error::Io(e),
        })?;
        let msg_type = MessageType::from_code(body[0])
            .ok_or_else(|| Error::Framing(format!("unknown message type 0x{:02x}", body[0])))?;
        let session = SessionId(body[1..17].try_into().expect("16-byte slice"));
        body.drain(..FRAME_OVERHEAD);
        Ok(Some(Frame {
            msg_type,
            session,
            payload: body,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_codes_are_unique() {
        let mut codes: Vec<u8> = MessageType::ALL.iter().map(|t| t.code()).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), MessageType::ALL.len());
        for t in MessageType::ALL {
            assert_eq!(MessageType::from_code(t.code()), Some(*t));
        }
    }

    #[test]
    fn frame_roundtrip() {
        let f = Frame::new(MessageType::Shares, SessionId([7; 16]), vec![1, 2, 3]);
        let bytes = f.encode().unwrap();
        assert_eq!(bytes.len(), f.encoded_len());
        assert_eq!(&bytes[..4], &20u32.to_be_bytes());
        let back = Frame::read_from(&mut bytes.as_slice()).unwrap().unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn truncated_and_malformed_frames() {
        let f = Frame::new(MessageType::Shares, SessionId([7; 16]), vec![1, 2, 3]);
        let bytes = f.encode().unwrap();
        for cut in 1..bytes.len() {
            assert!(matches!(Frame::read_from(&mut &bytes[..cut]), Err(Error::Framing(_))), "cut {cut}");
        }
        assert!(Frame::read_from(&mut &[][..]).unwrap().is_none());
        let short = 3u32.to_be_bytes();
        assert!(matches!(Frame::read_from(&mut &short[..]), Err(Error::Framing(_))));
        let huge = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes();
        assert!(matches!(Frame::read_from(&mut &huge[..]), Err(Error::Framing(_))));
        let oversize = Frame::new(MessageType::Shares, SessionId::CONTROL, vec![0; MAX_FRAME_LEN]);
        assert!(matches!(oversize.encode(), Err(Error::Framing(_))));
    }

    #[test]
    fn session_id_hex() {
        let id = SessionId([0xab; 16]);
        assert_eq!(SessionId::from_hex(&id.to_hex()).unwrap(), id);
        assert!(SessionId::from_hex("zz").is_err());
    }
}
