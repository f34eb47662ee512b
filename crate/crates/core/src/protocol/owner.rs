//! Data owner: decrypts blinded nodes, garbles the comparator and answers
//! the min-max selection. Keeps only its key and per-column plaintext maps.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use num_traits::Zero;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::csp::Acceptor;
use super::messages::{self, BoundSide, Close, MinmaxTriple, OpenAtOwner, RandomizedNode};
use super::metrics::{timed, Metrics, Phase};
use super::round::{owner_garble, owner_shares, FhShares};
use super::ProtocolParams;
use crate::circuits::ot::{base_ot_receive, OtSender};
use crate::circuits::{build_comparator, build_fh_comparator, BooleanCircuit};
use crate::error::{Error, Result};
use crate::homcrypto::{PrivateKey, PublicKey};
use crate::integrity::{self, dl_response, ped_response, IntegrityMode, MacParams};
use crate::ope::{Mode, OwnerState, Remap};
use crate::transport::{handshake, Endpoint, Frame, MessageType, Role, SessionId};

pub type OwnerStates = Arc<Mutex<BTreeMap<String, OwnerState>>>;

pub struct OwnerDaemon {
    params: ProtocolParams,
    sk: PrivateKey,
    mac: Option<MacParams>,
    states: OwnerStates,
    circuit: BooleanCircuit,
    rng: ChaCha20Rng,
    /// Extension-transfer state for the current analyst link; dropped after
    /// any failed session so the analyst must re-key.
    ot: Option<OtSender>,
    metrics: Option<Metrics>,
}

impl std::fmt::Debug for OwnerDaemon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OwnerDaemon").field("params", &self.params).finish_non_exhaustive()
    }
}

struct Session<'a> {
    id: SessionId,
    csp: &'a mut Endpoint,
    da: &'a mut Endpoint,
    analyst_key: Option<PublicKey>,
}

impl OwnerDaemon {
    pub fn new(
        params: ProtocolParams,
        sk: PrivateKey,
        mac: Option<MacParams>,
        states: OwnerStates,
        seed: u64,
    ) -> Result<Self> {
        params.check_key(sk.public_key())?;
        if params.integrity != IntegrityMode::Off {
            integrity::require(mac.as_ref())?;
        }
        let circuit = match params.mode() {
            Mode::Deterministic => build_comparator(params.width())?,
            Mode::FrequencyHiding => build_fh_comparator(params.width())?,
        };
        Ok(Self {
            params,
            sk,
            mac,
            states,
            circuit,
            rng: ChaCha20Rng::seed_from_u64(seed),
            ot: None,
            metrics: None,
        })
    }

    pub fn with_metrics(mut self, metrics: Metrics) -> Self {
        self.metrics = Some(metrics);
        self
    }

    pub fn states(&self) -> OwnerStates {
        Arc::clone(&self.states)
    }

    /// Serves one analyst link until it closes. `csp` is the long-lived
    /// server link.
    pub fn serve_analyst(&mut self, csp: &mut Endpoint, da: &mut Endpoint) -> Result<()> {
        // a new link always starts from fresh transfer keys
        self.ot = None;
        loop {
            let frame = match da.recv_any() {
                Ok(f) => f,
                Err(Error::ChannelClosed) => return Ok(()),
                Err(e) => return Err(e),
            };
            match frame.msg_type {
                MessageType::SessionOpen => {
                    let id = frame.session;
                    let result = self.run_session(csp, da, &frame);
                    if let Err(e) = &result {
                        log::warn!("session {id} aborted: {e}");
                        let reason = e.abort_reason();
                        csp.send_abort(id, reason);
                        da.send_abort(id, reason);
                        self.ot = None;
                    }
                    csp.forget(id);
                    da.forget(id);
                    if let Err(Error::ChannelClosed) = result {
                        return Ok(());
                    }
                }
                MessageType::Abort => {}
                other => log::debug!("ignoring stray {other:?} frame for session {}", frame.session),
            }
        }
    }

    fn run_session(&mut self, csp: &mut Endpoint, da: &mut Endpoint, open: &Frame) -> Result<()> {
        let msg = OpenAtOwner::decode(&open.payload)?;
        let analyst_key = match (self.params.mode(), msg.analyst_key) {
            (Mode::FrequencyHiding, Some(n)) => {
                let key = PublicKey::from_modulus(n)?;
                if key.n() <= self.sk.public_key().n() {
                    return Err(Error::Protocol("analyst modulus must exceed the owner modulus".into()));
                }
                Some(key)
            }
            (Mode::FrequencyHiding, None) => return Err(Error::Protocol("missing analyst key".into())),
            (Mode::Deterministic, _) => None,
        };
        let mut s = Session {
            id: open.session,
            csp,
            da,
            analyst_key,
        };
        match msg.base_ot {
            Some(point) => {
                let mask = OtSender::choose_mask(&mut self.rng);
                let (reply, keys) = base_ot_receive(&point, &mask, &mut self.rng)?;
                self.ot = Some(OtSender::from_base(&mask, keys)?);
                s.da.send_msg(s.id, MessageType::OtMsg, messages::encode_base_reply(&reply))?;
            }
            None if self.ot.is_none() => {
                return Err(Error::Protocol("transfer keys must be renewed".into()));
            }
            None => {}
        }

        let mut fh = (self.params.mode() == Mode::FrequencyHiding).then_some(FhShares::OWNER_INIT);
        let mut round = 0u32;
        loop {
            let frame = s.csp.recv(
                s.id,
                &[MessageType::RandomizedNode, MessageType::MinmaxTriple, MessageType::SessionClose],
            )?;
            match frame.msg_type {
                MessageType::RandomizedNode => {
                    fh = self.round(&mut s, round, &frame.payload, fh)?;
                    round += 1;
                }
                MessageType::MinmaxTriple => self.select(&mut s, &frame.payload)?,
                _ => {
                    let close = Close::decode(&frame.payload)?;
                    if !close.remap.is_empty() {
                        let remap = Remap::from_pairs(close.remap);
                        let mut states = self.states.lock().unwrap_or_else(|e| e.into_inner());
                        states.entry(close.column).or_default().apply_remap(&remap)?;
                    }
                    return Ok(());
                }
            }
        }
    }

    fn round(&mut self, s: &mut Session<'_>, round: u32, payload: &[u8], fh: Option<FhShares>) -> Result<Option<FhShares>> {
        let msg = RandomizedNode::decode(payload)?;
        if msg.round != round {
            return Err(Error::Protocol(format!("node for round {}, expected {round}", msg.round)));
        }
        let m = self.metrics.as_ref();
        let value = timed(m, s.id, round, Role::Owner, Phase::Decrypt, || self.sk.decrypt(&msg.node))?;
        if value >= self.params.blinded_limit() {
            return Err(Error::MalformedNode(format!("blinded value in round {round} exceeds the offset range")));
        }

        if self.params.integrity != IntegrityMode::Off {
            let mac = integrity::require(self.mac.as_ref())?;
            let proof = timed(m, s.id, round, Role::Owner, Phase::Verify, || -> Result<_> {
                Ok(match self.params.integrity {
                    IntegrityMode::Pedersen => {
                        let blinding = msg
                            .blinding
                            .as_ref()
                            .ok_or_else(|| Error::Protocol("missing blinded commitment exponent".into()))?;
                        ped_response(&value, &self.sk.decrypt(blinding)?, mac)
                    }
                    _ => dl_response(&value, mac),
                })
            })?;
            s.da.send_msg(s.id, MessageType::IntegrityProof, messages::encode_proof(round, &proof, mac.byte_width()))?;
        }

        let (req_round, request) = messages::decode_ot_request(&s.da.recv(s.id, &[MessageType::OtMsg])?.payload)?;
        if req_round != round {
            return Err(Error::Protocol(format!("transfer request for round {req_round}, expected {round}")));
        }
        let ot = self
            .ot
            .as_mut()
            .ok_or_else(|| Error::Protocol("transfer keys missing".into()))?;
        let circuit = &self.circuit;
        let rng = &mut self.rng;
        let (garbling, response) = timed(m, s.id, round, Role::Owner, Phase::Garble, || -> Result<_> {
            let g = owner_garble(circuit, &value, fh, rng)?;
            let response = ot.respond(&request, &g.evaluator_pairs)?;
            Ok((g, response))
        })?;
        s.da.send_msg(
            s.id,
            MessageType::GcPayload,
            messages::encode_gc(round, &garbling.circuit, &garbling.garbler_labels),
        )?;
        s.da.send_msg(s.id, MessageType::OtMsg, messages::encode_ot_response(round, &response))?;

        let slots = if fh.is_some() { 1 } else { 2 };
        let (out_round, outputs) = messages::decode_bits(&s.da.recv(s.id, &[MessageType::GcOutput])?.payload, slots)?;
        if out_round != round {
            return Err(Error::Protocol(format!("circuit output for round {out_round}, expected {round}")));
        }
        let shares = owner_shares(&garbling.round, &outputs);
        s.csp.send_msg(s.id, MessageType::Shares, messages::encode_shares(round, shares.to_byte()))?;
        Ok(garbling.round.fh_next)
    }

    /// Picks, per side, either the neighbour's blinded bound (re-encrypted
    /// for the analyst) or the blinded new order.
    fn select(&mut self, s: &mut Session<'_>, first: &[u8]) -> Result<()> {
        let analyst_key = s
            .analyst_key
            .clone()
            .ok_or_else(|| Error::Protocol("min-max outside frequency-hiding mode".into()))?;
        let second = s.csp.recv(s.id, &[MessageType::MinmaxTriple])?;
        let triples = [MinmaxTriple::decode(first)?, MinmaxTriple::decode(&second.payload)?];
        if triples[0].side != BoundSide::Min || triples[1].side != BoundSide::Max {
            return Err(Error::Protocol("min-max triples out of order".into()));
        }
        for t in triples {
            let d = self.sk.decrypt(&t.diff)?;
            let chosen = if d.is_zero() {
                let bound = self.sk.decrypt(&t.bound_blinded)?;
                analyst_key.encrypt(&bound, None, &mut self.rng)?
            } else {
                analyst_key.rerandomize(&t.order_blinded, None, &mut self.rng)?
            };
            s.da.send_msg(
                s.id,
                MessageType::MinmaxSelected,
                messages::encode_selected(t.side, &chosen, analyst_key.ciphertext_width()),
            )?;
        }
        Ok(())
    }
}

/// Serves analyst links one after another over the server link `csp`.
pub fn serve_owner<A: Acceptor>(daemon: &mut OwnerDaemon, csp: &mut Endpoint, acceptor: &mut A) -> Result<()> {
    let digest = daemon.params.digest();
    while let Some(mut ep) = acceptor.accept()? {
        match handshake(&mut ep, &digest, &[Role::Analyst]) {
            Ok(_) => {
                if let Err(e) = daemon.serve_analyst(csp, &mut ep) {
                    log::warn!("analyst link ended: {e}");
                }
            }
            Err(e) => log::warn!("rejected analyst connection: {e}"),
        }
    }
    Ok(())
}
