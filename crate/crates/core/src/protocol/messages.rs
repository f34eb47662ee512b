//! Payload layouts. Integers that depend on secrets are written at fixed
//! widths so that frame sizes reveal nothing beyond the parameters.

use num_bigint::BigUint;

use crate::circuits::ot::{ExtRequest, ExtResponse};
use crate::circuits::Label;
use crate::error::{Error, Result};
use crate::homcrypto::HomCiphertext;
use crate::integrity::NodeTag;
use crate::ope::{NodeValue, Order};
use crate::transport::codec::{Decoder, Encoder};
use crate::transport::SessionId;

fn decode_all<T>(payload: &[u8], f: impl FnOnce(&mut Decoder<'_>) -> Result<T>) -> Result<T> {
    let mut d = Decoder::new(payload);
    let v = f(&mut d)?;
    d.finish()?;
    Ok(v)
}

fn put_opt_biguint(e: &mut Encoder, v: Option<&BigUint>, width: usize) {
    match v {
        Some(v) => {
            e.bool(true).biguint_fixed(v, width);
        }
        None => {
            e.bool(false);
        }
    }
}

fn get_opt_biguint(d: &mut Decoder<'_>) -> Result<Option<BigUint>> {
    Ok(if d.bool()? { Some(d.biguint()?) } else { None })
}

fn put_opt_cipher(e: &mut Encoder, c: Option<&HomCiphertext>, width: usize) {
    match c {
        Some(c) => {
            e.bool(true).cipher(c, width);
        }
        None => {
            e.bool(false);
        }
    }
}

fn get_opt_cipher(d: &mut Decoder<'_>) -> Result<Option<HomCiphertext>> {
    Ok(if d.bool()? { Some(d.cipher()?) } else { None })
}

pub(crate) fn put_tag(e: &mut Encoder, tag: Option<&NodeTag>, tag_width: usize, cipher_width: usize) {
    match tag {
        None => {
            e.u8(0);
        }
        Some(NodeTag::DlMac(m)) => {
            e.u8(1).biguint_fixed(m, tag_width);
        }
        Some(NodeTag::Pedersen { commitment, blinding }) => {
            e.u8(2).biguint_fixed(commitment, tag_width).cipher(blinding, cipher_width);
        }
    }
}

pub(crate) fn get_tag(d: &mut Decoder<'_>) -> Result<Option<NodeTag>> {
    Ok(match d.u8()? {
        0 => None,
        1 => Some(NodeTag::DlMac(d.biguint()?)),
        2 => Some(NodeTag::Pedersen {
            commitment: d.biguint()?,
            blinding: d.cipher()?,
        }),
        t => return Err(Error::Protocol(format!("unknown tag kind {t}"))),
    })
}

/// Analyst to server: start an encryption on `column`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct OpenAtServer {
    pub column: String,
    pub analyst: [u8; 32],
    /// Analyst's own modulus, needed for the min-max exchange.
    pub analyst_key: Option<BigUint>,
}

impl OpenAtServer {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.str(&self.column).raw(&self.analyst);
        match &self.analyst_key {
            Some(n) => e.bool(true).biguint(n),
            None => e.bool(false),
        };
        e.finish()
    }

    pub fn decode(p: &[u8]) -> Result<Self> {
        decode_all(p, |d| {
            Ok(Self {
                column: d.string()?,
                analyst: d.array()?,
                analyst_key: if d.bool()? { Some(d.biguint()?) } else { None },
            })
        })
    }
}

/// Analyst to owner: a session is starting; optionally re-key the transfers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct OpenAtOwner {
    pub analyst_key: Option<BigUint>,
    pub base_ot: Option<[u8; 32]>,
}

impl OpenAtOwner {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match &self.analyst_key {
            Some(n) => e.bool(true).biguint(n),
            None => e.bool(false),
        };
        match &self.base_ot {
            Some(m) => e.bool(true).raw(m),
            None => e.bool(false),
        };
        e.finish()
    }

    pub fn decode(p: &[u8]) -> Result<Self> {
        decode_all(p, |d| {
            Ok(Self {
                analyst_key: if d.bool()? { Some(d.biguint()?) } else { None },
                base_ot: if d.bool()? { Some(d.array()?) } else { None },
            })
        })
    }
}

pub(crate) fn encode_base_reply(reply: &[[u8; 32]]) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(reply.len() as u32);
    for r in reply {
        e.raw(r);
    }
    e.finish()
}

pub(crate) fn decode_base_reply(p: &[u8]) -> Result<Vec<[u8; 32]>> {
    decode_all(p, |d| {
        let n = d.u32()? as usize;
        if n > 1024 {
            return Err(Error::Protocol("too many base transfer replies".into()));
        }
        (0..n).map(|_| d.array()).collect()
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct RandomizedNode {
    pub round: u32,
    pub node: HomCiphertext,
    pub blinding: Option<HomCiphertext>,
}

impl RandomizedNode {
    pub fn encode(&self, cipher_width: usize) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u32(self.round).cipher(&self.node, cipher_width);
        put_opt_cipher(&mut e, self.blinding.as_ref(), cipher_width);
        e.finish()
    }

    pub fn decode(p: &[u8]) -> Result<Self> {
        decode_all(p, |d| {
            Ok(Self {
                round: d.u32()?,
                node: d.cipher()?,
                blinding: get_opt_cipher(d)?,
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct RandomOffset {
    pub round: u32,
    pub r: BigUint,
    pub r2: Option<BigUint>,
    /// Stored MAC or commitment of the node.
    pub tag: Option<BigUint>,
}

impl RandomOffset {
    pub fn encode(&self, r_width: usize, r2_width: usize, tag_width: usize) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u32(self.round).biguint_fixed(&self.r, r_width);
        put_opt_biguint(&mut e, self.r2.as_ref(), r2_width);
        put_opt_biguint(&mut e, self.tag.as_ref(), tag_width);
        e.finish()
    }

    pub fn decode(p: &[u8]) -> Result<Self> {
        decode_all(p, |d| {
            Ok(Self {
                round: d.u32()?,
                r: d.biguint()?,
                r2: get_opt_biguint(d)?,
                tag: get_opt_biguint(d)?,
            })
        })
    }
}

pub(crate) fn encode_uid_probe(round: u32, uid: &[u8; 16]) -> Vec<u8> {
    Encoder::new().u32(round).raw(uid).finish()
}

pub(crate) fn decode_uid_probe(p: &[u8]) -> Result<(u32, [u8; 16])> {
    decode_all(p, |d| Ok((d.u32()?, d.array()?)))
}

/// Analyst's answer to a probe: a fresh owner-key encryption of the value
/// behind the identifier.
pub(crate) fn encode_uid_reply(c: &HomCiphertext, width: usize) -> Vec<u8> {
    Encoder::new().cipher(c, width).finish()
}

pub(crate) fn decode_uid_reply(p: &[u8]) -> Result<HomCiphertext> {
    decode_all(p, |d| d.cipher())
}

pub(crate) fn encode_proof(round: u32, m: &BigUint, width: usize) -> Vec<u8> {
    Encoder::new().u32(round).biguint_fixed(m, width).finish()
}

pub(crate) fn decode_proof(p: &[u8]) -> Result<(u32, BigUint)> {
    decode_all(p, |d| Ok((d.u32()?, d.biguint()?)))
}

pub(crate) fn encode_ot_request(round: u32, req: &ExtRequest) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(round).u32(req.count as u32).u32(req.columns.len() as u32);
    for c in &req.columns {
        e.bytes(c);
    }
    e.finish()
}

pub(crate) fn decode_ot_request(p: &[u8]) -> Result<(u32, ExtRequest)> {
    decode_all(p, |d| {
        let round = d.u32()?;
        let count = d.u32()? as usize;
        let n = d.u32()? as usize;
        if n > 1024 {
            return Err(Error::Protocol("too many transfer columns".into()));
        }
        let columns = (0..n).map(|_| Ok(d.bytes()?.to_vec())).collect::<Result<_>>()?;
        Ok((round, ExtRequest { count, columns }))
    })
}

pub(crate) fn encode_ot_response(round: u32, resp: &ExtResponse) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(round).u32(resp.pairs.len() as u32);
    for (a, b) in &resp.pairs {
        e.u128(*a).u128(*b);
    }
    e.finish()
}

pub(crate) fn decode_ot_response(p: &[u8]) -> Result<(u32, ExtResponse)> {
    decode_all(p, |d| {
        let round = d.u32()?;
        let n = d.u32()? as usize;
        if n.saturating_mul(32) > d.remaining() {
            return Err(Error::Protocol("truncated transfer response".into()));
        }
        let pairs = (0..n).map(|_| Ok((d.u128()?, d.u128()?))).collect::<Result<_>>()?;
        Ok((round, ExtResponse { pairs }))
    })
}

pub(crate) fn encode_gc(round: u32, circuit: &[u8], labels: &[Label]) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(round).bytes(circuit).u32(labels.len() as u32);
    for l in labels {
        e.u128(*l);
    }
    e.finish()
}

pub(crate) fn decode_gc(p: &[u8]) -> Result<(u32, Vec<u8>, Vec<Label>)> {
    decode_all(p, |d| {
        let round = d.u32()?;
        let circuit = d.bytes()?.to_vec();
        let n = d.u32()? as usize;
        if n.saturating_mul(16) > d.remaining() {
            return Err(Error::Protocol("truncated garbler labels".into()));
        }
        let labels = (0..n).map(|_| d.u128()).collect::<Result<_>>()?;
        Ok((round, circuit, labels))
    })
}

pub(crate) fn encode_bits(round: u32, bits: &[bool]) -> Vec<u8> {
    let packed = bits.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b as u8) << i);
    Encoder::new().u32(round).u8(packed).finish()
}

pub(crate) fn decode_bits(p: &[u8], count: usize) -> Result<(u32, Vec<bool>)> {
    decode_all(p, |d| {
        let round = d.u32()?;
        let packed = d.u8()?;
        if packed >> count != 0 {
            return Err(Error::Protocol("stray output bits".into()));
        }
        Ok((round, (0..count).map(|i| packed >> i & 1 == 1).collect()))
    })
}

pub(crate) fn encode_shares(round: u32, byte: u8) -> Vec<u8> {
    Encoder::new().u32(round).u8(byte).finish()
}

pub(crate) fn decode_shares(p: &[u8]) -> Result<(u32, u8)> {
    decode_all(p, |d| Ok((d.u32()?, d.u8()?)))
}

pub(crate) fn encode_order_result(order: Order, rebalanced: bool) -> Vec<u8> {
    Encoder::new().u128(order).bool(rebalanced).finish()
}

pub(crate) fn decode_order_result(p: &[u8]) -> Result<(Order, bool)> {
    decode_all(p, |d| Ok((d.u128()?, d.bool()?)))
}

/// Analyst uploads: the value (ciphertext or identifier) with its tag, or
/// the min-max bounds of a frequency-hiding insert.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Upload {
    Value { value: NodeValue, tag: Option<NodeTag> },
    Bounds { min: HomCiphertext, max: HomCiphertext },
}

impl Upload {
    pub fn encode(&self, tag_width: usize, width: usize) -> Vec<u8> {
        let mut e = Encoder::new();
        match self {
            Upload::Value {
                value: NodeValue::Cipher(c),
                tag,
            } => {
                e.u8(0).cipher(c, width);
                put_tag(&mut e, tag.as_ref(), tag_width, width);
            }
            Upload::Value {
                value: NodeValue::Uid(u),
                tag,
            } => {
                e.u8(1).raw(u);
                put_tag(&mut e, tag.as_ref(), tag_width, width);
            }
            Upload::Bounds { min, max } => {
                e.u8(2).cipher(min, width).cipher(max, width);
            }
        }
        e.finish()
    }

    pub fn decode(p: &[u8]) -> Result<Self> {
        decode_all(p, |d| {
            Ok(match d.u8()? {
                0 => Upload::Value {
                    value: NodeValue::Cipher(d.cipher()?),
                    tag: get_tag(d)?,
                },
                1 => Upload::Value {
                    value: NodeValue::Uid(d.array()?),
                    tag: get_tag(d)?,
                },
                2 => Upload::Bounds {
                    min: d.cipher()?,
                    max: d.cipher()?,
                },
                k => return Err(Error::Protocol(format!("unknown upload kind {k}"))),
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BoundSide {
    Min = 0,
    Max = 1,
}

impl BoundSide {
    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(BoundSide::Min),
            1 => Ok(BoundSide::Max),
            _ => Err(Error::Protocol(format!("unknown bound side {c}"))),
        }
    }
}

/// Server to owner, once per side: `[[d]]`, `[[y r]]_DA`, `[[c r]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct MinmaxTriple {
    pub side: BoundSide,
    pub diff: HomCiphertext,
    pub order_blinded: HomCiphertext,
    pub bound_blinded: HomCiphertext,
}

impl MinmaxTriple {
    pub fn encode(&self, owner_width: usize, analyst_width: usize) -> Vec<u8> {
        Encoder::new()
            .u8(self.side as u8)
            .cipher(&self.diff, owner_width)
            .cipher(&self.order_blinded, analyst_width)
            .cipher(&self.bound_blinded, owner_width)
            .finish()
    }

    pub fn decode(p: &[u8]) -> Result<Self> {
        decode_all(p, |d| {
            Ok(Self {
                side: BoundSide::from_code(d.u8()?)?,
                diff: d.cipher()?,
                order_blinded: d.cipher()?,
                bound_blinded: d.cipher()?,
            })
        })
    }
}

pub(crate) fn encode_minmax_randoms(r1: &BigUint, r2: &BigUint, width: usize) -> Vec<u8> {
    Encoder::new().biguint_fixed(r1, width).biguint_fixed(r2, width).finish()
}

pub(crate) fn decode_minmax_randoms(p: &[u8]) -> Result<(BigUint, BigUint)> {
    decode_all(p, |d| Ok((d.biguint()?, d.biguint()?)))
}

pub(crate) fn encode_selected(side: BoundSide, c: &HomCiphertext, width: usize) -> Vec<u8> {
    Encoder::new().u8(side as u8).cipher(c, width).finish()
}

pub(crate) fn decode_selected(p: &[u8]) -> Result<(BoundSide, HomCiphertext)> {
    decode_all(p, |d| Ok((BoundSide::from_code(d.u8()?)?, d.cipher()?)))
}

/// Server to owner and analyst at a successful end. Only the owner gets the
/// remap of its column; the analyst learns just that a rebalance happened.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub(crate) struct Close {
    pub column: String,
    pub rebalanced: bool,
    pub remap: Vec<(Order, Order)>,
}

impl Close {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.str(&self.column).bool(self.rebalanced).u64(self.remap.len() as u64);
        for (a, b) in &self.remap {
            e.u128(*a).u128(*b);
        }
        e.finish()
    }

    pub fn decode(p: &[u8]) -> Result<Self> {
        decode_all(p, |d| {
            let column = d.string()?;
            let rebalanced = d.bool()?;
            let n = d.u64()? as usize;
            if n.saturating_mul(32) > d.remaining() {
                return Err(Error::Protocol("truncated remap".into()));
            }
            let remap = (0..n).map(|_| Ok((d.u128()?, d.u128()?))).collect::<Result<_>>()?;
            Ok(Self {
                column,
                rebalanced,
                remap,
            })
        })
    }
}

/// Status byte then either a JSON body or an error message.
pub(crate) fn encode_reply(body: std::result::Result<Vec<u8>, String>) -> Vec<u8> {
    match body {
        Ok(b) => Encoder::new().u8(0).bytes(&b).finish(),
        Err(m) => Encoder::new().u8(1).str(&m).finish(),
    }
}

pub(crate) fn decode_reply(p: &[u8]) -> Result<Vec<u8>> {
    decode_all(p, |d| match d.u8()? {
        0 => Ok(d.bytes()?.to_vec()),
        _ => Err(Error::Usage(format!("server rejected request: {}", d.string()?))),
    })
}

pub(crate) fn encode_sessions(sessions: &[SessionId]) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(sessions.len() as u32);
    for s in sessions {
        e.raw(&s.0);
    }
    e.finish()
}

pub(crate) fn decode_sessions(p: &[u8]) -> Result<Vec<SessionId>> {
    decode_all(p, |d| {
        let n = d.u32()? as usize;
        if n.saturating_mul(16) > d.remaining() {
            return Err(Error::Protocol("truncated session list".into()));
        }
        (0..n).map(|_| Ok(SessionId(d.array()?))).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homcrypto::keygen_for_testing;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn payloads_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (pk, _) = keygen_for_testing(128, &mut rng).unwrap();
        let w = pk.ciphertext_width();
        let c = pk.encrypt(&BigUint::from(5u8), None, &mut rng).unwrap();

        let open = OpenAtServer {
            column: "X1".into(),
            analyst: [7; 32],
            analyst_key: Some(pk.n().clone()),
        };
        assert_eq!(OpenAtServer::decode(&open.encode()).unwrap(), open);
        let o2 = OpenAtOwner {
            analyst_key: None,
            base_ot: Some([3; 32]),
        };
        assert_eq!(OpenAtOwner::decode(&o2.encode()).unwrap(), o2);

        let node = RandomizedNode {
            round: 4,
            node: c.clone(),
            blinding: Some(c.clone()),
        };
        assert_eq!(RandomizedNode::decode(&node.encode(w)).unwrap(), node);

        let off = RandomOffset {
            round: 1,
            r: BigUint::from(99u8),
            r2: None,
            tag: Some(BigUint::from(12345u32)),
        };
        let a = off.encode(8, 40, 64);
        let b = RandomOffset {
            r: BigUint::from(1u8) << 60u32,
            ..off.clone()
        }
        .encode(8, 40, 64);
        assert_eq!(a.len(), b.len(), "offset encoding must not depend on the value");
        assert_eq!(RandomOffset::decode(&a).unwrap(), off);

        for up in [
            Upload::Value {
                value: NodeValue::Cipher(c.clone()),
                tag: Some(NodeTag::Pedersen {
                    commitment: BigUint::from(77u8),
                    blinding: c.clone(),
                }),
            },
            Upload::Value {
                value: NodeValue::Uid([9; 16]),
                tag: Some(NodeTag::DlMac(BigUint::from(3u8))),
            },
            Upload::Bounds {
                min: c.clone(),
                max: c.clone(),
            },
        ] {
            assert_eq!(Upload::decode(&up.encode(16, w)).unwrap(), up);
        }

        let t = MinmaxTriple {
            side: BoundSide::Max,
            diff: c.clone(),
            order_blinded: c.clone(),
            bound_blinded: c.clone(),
        };
        assert_eq!(MinmaxTriple::decode(&t.encode(w, w)).unwrap(), t);

        let close = Close {
            column: "A".into(),
            rebalanced: true,
            remap: vec![(1, 2), (3, 9)],
        };
        assert_eq!(Close::decode(&close.encode()).unwrap(), close);

        assert_eq!(decode_bits(&encode_bits(3, &[true, false]), 2).unwrap(), (3, vec![true, false]));
        assert!(decode_bits(&encode_bits(3, &[true, true]), 1).is_err());
        let s = vec![SessionId([1; 16]), SessionId([2; 16])];
        assert_eq!(decode_sessions(&encode_sessions(&s)).unwrap(), s);
        assert!(matches!(decode_reply(&encode_reply(Err("nope".into()))), Err(Error::Usage(_))));
    }
}
