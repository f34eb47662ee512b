use super::codec::{Decoder, Encoder};
use super::{Endpoint, MessageType, Role, SessionId};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u8 = 1;

/// Exchanges role, protocol version and parameter digest with the peer.
///
/// Both sides send before reading, so a mismatch is detected on both ends.
/// Returns the peer's role.
pub fn handshake(ep: &mut Endpoint, digest: &[u8; 32], accept: &[Role]) -> Result<Role> {
    let payload = Encoder::new()
        .u8(ep.local_role().code())
        .u8(PROTOCOL_VERSION)
        .raw(digest)
        .finish();
    ep.send_msg(SessionId::CONTROL, MessageType::Handshake, payload)?;
    let frame = ep.recv(SessionId::CONTROL, &[MessageType::Handshake])?;
    let mut d = Decoder::new(&frame.payload);
    let role = Role::from_code(d.u8()?).ok_or_else(|| Error::Handshake("unknown peer role".into()))?;
    let version = d.u8()?;
    let peer_digest: [u8; 32] = d.array()?;
    d.finish()?;
    if version != PROTOCOL_VERSION {
        return Err(Error::Handshake(format!(
            "protocol version {version} not supported (expected {PROTOCOL_VERSION})"
        )));
    }
    if !accept.contains(&role) {
        return Err(Error::Handshake(format!("unexpected peer role {role}")));
    }
    if &peer_digest != digest {
        return Err(Error::Handshake("parameter digest mismatch".into()));
    }
    ep.set_peer(role);
    Ok(role)
}
