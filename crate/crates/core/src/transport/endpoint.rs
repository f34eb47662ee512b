use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{Read, Write};
use std::sync::{Arc, Mutex};

use super::{codec::Encoder, Frame, MessageType, Role, SessionId};
use crate::error::{AbortReason, Error, Result};

/// Shared log of encoded frames in send order.
#[derive(Debug, Clone, Default)]
pub struct Transcript(Arc<Mutex<Vec<Vec<u8>>>>);

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, frame: Vec<u8>) {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).push(frame);
    }

    pub fn frames(&self) -> Vec<Vec<u8>> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn message_types(&self) -> Vec<MessageType> {
        self.frames()
            .iter()
            .filter_map(|f| f.get(4).and_then(|&c| MessageType::from_code(c)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub frames_sent: u64,
    pub bytes_sent: u64,
    pub frames_received: u64,
    pub bytes_received: u64,
}

/// One side of a framed, session-multiplexed link.
///
/// Frames for sessions other than the one being waited on are buffered per
/// session and delivered in arrival order. Any framing error poisons the
/// endpoint for good.
pub struct Endpoint {
    local: Role,
    peer: Option<Role>,
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    pending: HashMap<SessionId, VecDeque<Frame>>,
    arrival: VecDeque<SessionId>,
    closed: HashSet<SessionId>,
    transcript: Option<Transcript>,
    poisoned: bool,
    stats: LinkStats,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("local", &self.local)
            .field("peer", &self.peer)
            .field("poisoned", &self.poisoned)
            .finish()
    }
}

impl Endpoint {
    pub fn new(local: Role, reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>) -> Self {
        Self {
            local,
            peer: None,
            reader,
            writer,
            pending: HashMap::new(),
            arrival: VecDeque::new(),
            closed: HashSet::new(),
            transcript: None,
            poisoned: false,
            stats: LinkStats::default(),
        }
    }

    pub fn local_role(&self) -> Role {
        self.local
    }

    pub fn peer_role(&self) -> Option<Role> {
        self.peer
    }

    pub(super) fn set_peer(&mut self, peer: Role) {
        self.peer = Some(peer);
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    /// Records every frame sent from now on.
    pub fn record_into(&mut self, transcript: Transcript) {
        self.transcript = Some(transcript);
    }

    fn check_usable(&self) -> Result<()> {
        if self.poisoned {
            return Err(Error::Framing("channel poisoned by an earlier framing error".into()));
        }
        Ok(())
    }

    pub fn send(&mut self, frame: &Frame) -> Result<()> {
        self.check_usable()?;
        let bytes = frame.encode()?;
        self.write_raw(&bytes)?;
        self.stats.frames_sent += 1;
        self.stats.bytes_sent += bytes.len() as u64;
        if let Some(t) = &self.transcript {
            t.push(bytes);
        }
        Ok(())
    }

    pub fn send_msg(&mut self, session: SessionId, msg_type: MessageType, payload: Vec<u8>) -> Result<()> {
        self.send(&Frame::new(msg_type, session, payload))
    }

    /// Writes bytes without framing; only for fault-injection tests.
    pub fn write_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.writer.write_all(bytes).map_err(map_write_err)?;
        self.writer.flush().map_err(map_write_err)
    }

    /// Best-effort abort notification; errors are ignored.
    pub fn send_abort(&mut self, session: SessionId, reason: AbortReason) {
        let payload = Encoder::new().u8(reason as u8).finish();
        let _ = self.send_msg(session, MessageType::Abort, payload);
    }

    fn read_frame(&mut self) -> Result<Frame> {
        self.check_usable()?;
        match Frame::read_from(&mut self.reader) {
            Ok(Some(frame)) => {
                self.stats.frames_received += 1;
                self.stats.bytes_received += frame.encoded_len() as u64;
                Ok(frame)
            }
            Ok(None) => Err(Error::ChannelClosed),
            Err(e @ Error::Framing(_)) => {
                self.poisoned = true;
                Err(e)
            }
            Err(Error::Io(e)) if is_disconnect(&e) => Err(Error::ChannelClosed),
            Err(e) => Err(e),
        }
    }

    fn admit(frame: Frame, expected: &[MessageType]) -> Result<Frame> {
        if frame.msg_type == MessageType::Abort && !expected.contains(&MessageType::Abort) {
            let code = frame.payload.first().copied().unwrap_or(0);
            return Err(Error::Aborted(AbortReason::from_code(code)));
        }
        if !expected.is_empty() && !expected.contains(&frame.msg_type) {
            return Err(Error::UnexpectedMessage {
                expected: expected.to_vec(),
                got: frame.msg_type,
            });
        }
        Ok(frame)
    }

    /// Next frame of `session`, which must have one of the `expected` types.
    /// An empty `expected` accepts any type. A peer abort surfaces as
    /// [`Error::Aborted`].
    pub fn recv(&mut self, session: SessionId, expected: &[MessageType]) -> Result<Frame> {
        if let Some(frame) = self.pop_pending(session) {
            return Self::admit(frame, expected);
        }
        loop {
            let frame = self.read_frame()?;
            if frame.session == session {
                return Self::admit(frame, expected);
            }
            if self.closed.contains(&frame.session) {
                continue;
            }
            self.arrival.push_back(frame.session);
            self.pending.entry(frame.session).or_default().push_back(frame);
        }
    }

    /// Next frame of any session, buffered frames first.
    pub fn recv_any(&mut self) -> Result<Frame> {
        while let Some(session) = self.arrival.front().copied() {
            if let Some(frame) = self.pop_pending(session) {
                return Ok(frame);
            }
            self.arrival.pop_front();
        }
        loop {
            let frame = self.read_frame()?;
            if !self.closed.contains(&frame.session) {
                return Ok(frame);
            }
        }
    }

    fn pop_pending(&mut self, session: SessionId) -> Option<Frame> {
        let queue = self.pending.get_mut(&session)?;
        let frame = queue.pop_front();
        if queue.is_empty() {
            self.pending.remove(&session);
        }
        if frame.is_some() {
            if let Some(pos) = self.arrival.iter().position(|s| *s == session) {
                self.arrival.remove(pos);
            }
        }
        frame
    }

    /// Drops anything buffered for a finished session and ignores its
    /// frames from now on.
    pub fn forget(&mut self, session: SessionId) {
        if session != SessionId::CONTROL {
            self.closed.insert(session);
        }
        self.pending.remove(&session);
        self.arrival.retain(|s| *s != session);
    }
}

fn is_disconnect(e: &std::io::Error) -> bool {
    use std::io::ErrorKind::*;
    matches!(e.kind(), BrokenPipe | ConnectionReset | ConnectionAborted | UnexpectedEof)
}

fn map_write_err(e: std::io::Error) -> Error {
    if is_disconnect(&e) {
        Error::ChannelClosed
    } else {
        Error::Io(e)
    }
}
