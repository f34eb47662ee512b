//! Data analyst: holds the private value, evaluates the garbled comparator
//! and uploads the new entry.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::messages::{self, BoundSide, Close, OpenAtOwner, OpenAtServer, RandomOffset, Upload};
use super::metrics::{timed, Metrics, Phase};
use super::round::{analyst_choices, analyst_finish, FhShares};
use super::ProtocolParams;
use crate::circuits::ot::{BaseOtSender, OtReceiver};
use crate::circuits::{build_comparator, build_fh_comparator, BooleanCircuit, GarbledCircuit};
use crate::datastore::{Condition, OrderBounds, Predicate, Projection, QueryResult, RangeQuery};
use crate::error::{Error, Result};
use crate::homcrypto::{HomCiphertext, PrivateKey, PublicKey, RandomnessPool};
use crate::integrity::{self, dl_mac_make, dl_mac_verify, ped_commit_make, ped_verify, IntegrityMode, MacParams, NodeTag};
use crate::ope::{Mode, NodeValue, Order};
use crate::transport::{handshake, Endpoint, MessageType, Role, SessionId};

#[derive(Clone)]
pub struct AnalystConfig {
    pub params: ProtocolParams,
    pub owner_key: PublicKey,
    /// Group parameters shared with the owner; required when integrity
    /// checking is on.
    pub mac: Option<MacParams>,
    /// Own key pair; required in frequency-hiding mode and must have a
    /// larger modulus than the owner's.
    pub key: Option<PrivateKey>,
    /// Identifier the server counts sessions against.
    pub id: [u8; 32],
    pub seed: u64,
}

impl std::fmt::Debug for AnalystConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnalystConfig")
            .field("params", &self.params)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncryptOutcome {
    pub session: SessionId,
    pub rounds: usize,
    pub order: Order,
    /// `[order, order]` in deterministic mode, the duplicate range otherwise.
    pub bounds: OrderBounds,
    pub rebalanced: bool,
}

pub struct Analyst {
    config: AnalystConfig,
    csp: Endpoint,
    owner: Endpoint,
    circuit: BooleanCircuit,
    rng: ChaCha20Rng,
    ot: Option<OtReceiver>,
    /// Values behind identifiers this analyst uploaded.
    uids: BTreeMap<[u8; 16], BigUint>,
    pool: RandomnessPool,
    metrics: Option<Metrics>,
}

impl std::fmt::Debug for Analyst {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Analyst").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Analyst {
    /// Runs the handshakes on both links.
    pub fn connect(config: AnalystConfig, mut csp: Endpoint, mut owner: Endpoint) -> Result<Self> {
        let p = config.params;
        p.check_key(&config.owner_key)?;
        if p.integrity != IntegrityMode::Off {
            integrity::require(config.mac.as_ref())?;
        }
        if p.mode() == Mode::FrequencyHiding {
            let key = config
                .key
                .as_ref()
                .ok_or_else(|| Error::Config("frequency-hiding mode needs an analyst key pair".into()))?;
            if key.public_key().n() <= config.owner_key.n() {
                return Err(Error::Config("analyst modulus must exceed the owner modulus".into()));
            }
        }
        let digest = p.digest();
        handshake(&mut csp, &digest, &[Role::Csp])?;
        handshake(&mut owner, &digest, &[Role::Owner])?;
        let circuit = match p.mode() {
            Mode::Deterministic => build_comparator(p.width())?,
            Mode::FrequencyHiding => build_fh_comparator(p.width())?,
        };
        let pool = RandomnessPool::new(&config.owner_key);
        Ok(Self {
            rng: ChaCha20Rng::seed_from_u64(config.seed),
            config,
            csp,
            owner,
            circuit,
            ot: None,
            uids: BTreeMap::new(),
            pool,
            metrics: None,
        })
    }

    pub fn with_metrics(mut self, metrics: Metrics) -> Self {
        self.metrics = Some(metrics);
        self
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.config.params
    }

    /// Precomputes nonces for uploads under the owner's key.
    pub fn prefill_pool(&mut self, count: usize) -> Result<()> {
        self.pool.fill(&self.config.owner_key, count, &mut self.rng)
    }

    /// Obtains the order of `value` in `column`, inserting it unless an
    /// equal entry exists (deterministic mode).
    pub fn encrypt(&mut self, column: &str, value: &BigUint) -> Result<EncryptOutcome> {
        if value.bits() > u64::from(self.config.params.table.l) {
            return Err(Error::Domain(format!("{value} does not fit in {} bits", self.config.params.table.l)));
        }
        let id = SessionId::random(&mut self.rng);
        let result = self.session(id, column, value);
        if let Err(e) = &result {
            let reason = e.abort_reason();
            self.csp.send_abort(id, reason);
            self.owner.send_abort(id, reason);
            self.ot = None;
        }
        self.csp.forget(id);
        self.owner.forget(id);
        result
    }

    fn session(&mut self, id: SessionId, column: &str, value: &BigUint) -> Result<EncryptOutcome> {
        let fh = self.config.params.mode() == Mode::FrequencyHiding;
        let analyst_n = if fh {
            self.config.key.as_ref().map(|k| k.public_key().n().clone())
        } else {
            None
        };
        let base = if self.ot.is_none() {
            Some(BaseOtSender::new(&mut self.rng))
        } else {
            None
        };
        let open_owner = OpenAtOwner {
            analyst_key: analyst_n.clone(),
            base_ot: base.as_ref().map(|(_, msg)| *msg),
        };
        self.owner.send_msg(id, MessageType::SessionOpen, open_owner.encode())?;
        let open_server = OpenAtServer {
            column: column.to_owned(),
            analyst: self.config.id,
            analyst_key: analyst_n,
        };
        self.csp.send_msg(id, MessageType::SessionOpen, open_server.encode())?;
        if let Some((sender, _)) = base {
            let reply = messages::decode_base_reply(&self.owner.recv(id, &[MessageType::OtMsg])?.payload)?;
            self.ot = Some(OtReceiver::from_base(sender.finish(&reply)?)?);
        }

        let mut state = fh.then_some(FhShares::ANALYST_INIT);
        let mut rounds = 0u32;
        let (order, rebalanced) = loop {
            let frame = self.csp.recv(
                id,
                &[MessageType::RandomOffset, MessageType::UidProbe, MessageType::OrderResult],
            )?;
            match frame.msg_type {
                MessageType::RandomOffset => {
                    state = self.round(id, rounds, &frame.payload, value, state)?;
                    rounds += 1;
                }
                MessageType::UidProbe => self.answer_probe(id, &frame.payload)?,
                _ => break messages::decode_order_result(&frame.payload)?,
            }
        };

        let upload = self.make_upload(value)?;
        let tag_width = self.config.mac.as_ref().map_or(0, MacParams::byte_width);
        let width = self.config.owner_key.ciphertext_width();
        self.csp
            .send_msg(id, MessageType::CipherUpload, upload.encode(tag_width, width))?;

        let bounds = if fh { self.min_max(id, order)? } else { OrderBounds::exact(order) };
        Close::decode(&self.csp.recv(id, &[MessageType::SessionClose])?.payload)?;
        Ok(EncryptOutcome {
            session: id,
            rounds: rounds as usize,
            order,
            bounds,
            rebalanced,
        })
    }

    fn encrypt_for_owner(&mut self, m: &BigUint) -> Result<HomCiphertext> {
        self.config.owner_key.encrypt(m, Some(&self.pool), &mut self.rng)
    }

    fn answer_probe(&mut self, id: SessionId, payload: &[u8]) -> Result<()> {
        let (_, uid) = messages::decode_uid_probe(payload)?;
        let value = self
            .uids
            .get(&uid)
            .cloned()
            .ok_or_else(|| Error::Protocol("probe for an identifier this analyst never issued".into()))?;
        let c = self.encrypt_for_owner(&value)?;
        let width = self.config.owner_key.ciphertext_width();
        self.csp
            .send_msg(id, MessageType::UidProbe, messages::encode_uid_reply(&c, width))
    }

    fn round(
        &mut self,
        id: SessionId,
        round: u32,
        payload: &[u8],
        value: &BigUint,
        fh: Option<FhShares>,
    ) -> Result<Option<FhShares>> {
        let p = self.config.params;
        let offset = RandomOffset::decode(payload)?;
        if offset.round != round {
            return Err(Error::Protocol(format!("offset for round {}, expected {round}", offset.round)));
        }
        if offset.r.bits() > p.offset_bits() {
            return Err(Error::Protocol("blinding offset out of range".into()));
        }
        let m = self.metrics.as_ref();
        if p.integrity != IntegrityMode::Off {
            let (proof_round, proof) =
                messages::decode_proof(&self.owner.recv(id, &[MessageType::IntegrityProof])?.payload)?;
            if proof_round != round {
                return Err(Error::Protocol(format!("proof for round {proof_round}, expected {round}")));
            }
            let mac = integrity::require(self.config.mac.as_ref())?;
            let tag = offset
                .tag
                .as_ref()
                .ok_or_else(|| Error::Integrity(format!("no tag for the node of round {round}")))?;
            let ok = timed(m, id, round, Role::Analyst, Phase::Verify, || match (p.integrity, &offset.r2) {
                (IntegrityMode::Pedersen, Some(r2)) => ped_verify(tag, &offset.r, r2, &proof, mac),
                (IntegrityMode::Pedersen, None) => false,
                _ => dl_mac_verify(tag, &offset.r, &proof, mac),
            });
            if !ok {
                return Err(Error::Integrity(format!("node of round {round} failed verification")));
            }
        }

        let blinded = value + &offset.r;
        let ot = self
            .ot
            .as_mut()
            .ok_or_else(|| Error::Protocol("transfer keys missing".into()))?;
        let circuit = &self.circuit;
        let rng = &mut self.rng;
        let (ar, request, batch) = timed(m, id, round, Role::Analyst, Phase::Evaluate, || -> Result<_> {
            let (choices, ar) = analyst_choices(circuit, &blinded, fh, rng)?;
            let (request, batch) = ot.request(&choices);
            Ok((ar, request, batch))
        })?;
        self.owner
            .send_msg(id, MessageType::OtMsg, messages::encode_ot_request(round, &request))?;
        let (gc_round, gc, garbler_labels) =
            messages::decode_gc(&self.owner.recv(id, &[MessageType::GcPayload])?.payload)?;
        let (resp_round, response) =
            messages::decode_ot_response(&self.owner.recv(id, &[MessageType::OtMsg])?.payload)?;
        if gc_round != round || resp_round != round {
            return Err(Error::Protocol(format!("garbled material for round {gc_round}/{resp_round}, expected {round}")));
        }
        let ot = self.ot.as_ref().expect("checked above");
        let finish = timed(m, id, round, Role::Analyst, Phase::Evaluate, || -> Result<_> {
            let labels = ot.receive(batch, &response)?;
            let outputs = GarbledCircuit::from_bytes(&gc)?.evaluate_and_decode(circuit, &garbler_labels, &labels)?;
            analyst_finish(&ar, &outputs)
        })?;
        self.owner
            .send_msg(id, MessageType::GcOutput, messages::encode_bits(round, &finish.to_owner))?;
        self.csp
            .send_msg(id, MessageType::Shares, messages::encode_shares(round, finish.shares.to_byte()))?;
        Ok(finish.fh_next)
    }

    fn make_upload(&mut self, value: &BigUint) -> Result<Upload> {
        let p = self.config.params;
        let node = if p.uid {
            let mut uid = [0u8; 16];
            self.rng.fill_bytes(&mut uid);
            self.uids.insert(uid, value.clone());
            NodeValue::Uid(uid)
        } else {
            NodeValue::Cipher(self.encrypt_for_owner(value)?)
        };
        let tag = match p.integrity {
            IntegrityMode::Off => None,
            IntegrityMode::DlMac => Some(NodeTag::DlMac(dl_mac_make(value, integrity::require(self.config.mac.as_ref())?))),
            IntegrityMode::Pedersen => {
                let mac = integrity::require(self.config.mac.as_ref())?.clone();
                let a = mac.random_exponent(&mut self.rng);
                Some(NodeTag::Pedersen {
                    commitment: ped_commit_make(value, &a, &mac),
                    blinding: self.encrypt_for_owner(&a)?,
                })
            }
        };
        Ok(Upload::Value { value: node, tag })
    }

    fn min_max(&mut self, id: SessionId, order: Order) -> Result<OrderBounds> {
        let key = self
            .config
            .key
            .clone()
            .ok_or_else(|| Error::Config("missing analyst key".into()))?;
        let n = self.config.owner_key.n().clone();
        let (r1, r2) = messages::decode_minmax_randoms(&self.csp.recv(id, &[MessageType::MinmaxRandoms])?.payload)?;
        let mut out = [0u128; 2];
        for (i, (side, r)) in [(BoundSide::Min, r1), (BoundSide::Max, r2)].into_iter().enumerate() {
            let (got, c) = messages::decode_selected(&self.owner.recv(id, &[MessageType::MinmaxSelected])?.payload)?;
            if got != side {
                return Err(Error::Protocol("min-max selections out of order".into()));
            }
            let inv = r
                .modinv(&n)
                .ok_or_else(|| Error::MinMaxInconsistent("blinding factor not invertible".into()))?;
            let v = key.decrypt(&c)? * inv % &n;
            out[i] = u128::try_from(&v).map_err(|_| Error::MinMaxInconsistent("bound outside the order space".into()))?;
        }
        let [lo, hi] = out;
        let max_order = self.config.params.table.max_order;
        if lo == 0 || hi >= max_order || lo > order || order > hi {
            return Err(Error::MinMaxInconsistent(format!("bounds ({lo}, {hi}) do not bracket order {order}")));
        }
        let min = self.encrypt_for_owner(&BigUint::from(lo))?;
        let max = self.encrypt_for_owner(&BigUint::from(hi))?;
        let width = self.config.owner_key.ciphertext_width();
        self.csp
            .send_msg(id, MessageType::CipherUpload, Upload::Bounds { min, max }.encode(0, width))?;
        Ok(OrderBounds { min: lo, max: hi })
    }

    /// Runs a range query on order predicates.
    pub fn query(&mut self, query: &RangeQuery) -> Result<QueryResult> {
        let id = SessionId::random(&mut self.rng);
        let body = serde_json::to_vec(query)?;
        let result = (|| {
            self.csp.send_msg(id, MessageType::Query, body)?;
            let reply = messages::decode_reply(&self.csp.recv(id, &[MessageType::QueryResult])?.payload)?;
            Ok(serde_json::from_slice(&reply)?)
        })();
        self.csp.forget(id);
        result
    }

    /// Removes the entries inserted by `sessions`; returns how many went.
    pub fn cleanup(&mut self, sessions: &[SessionId]) -> Result<u64> {
        let id = SessionId::random(&mut self.rng);
        let result = (|| {
            self.csp
                .send_msg(id, MessageType::Cleanup, messages::encode_sessions(sessions))?;
            let reply = messages::decode_reply(&self.csp.recv(id, &[MessageType::CleanupAck])?.payload)?;
            let bytes: [u8; 8] = reply
                .as_slice()
                .try_into()
                .map_err(|_| Error::Protocol("malformed cleanup reply".into()))?;
            Ok(u64::from_be_bytes(bytes))
        })();
        self.csp.forget(id);
        result
    }

    /// Encrypts every bound, runs the conjunction, then removes whatever the
    /// bound encryptions inserted.
    pub fn range_query(&mut self, conditions: &[Condition], projection: Projection) -> Result<QueryResult> {
        let mut sessions = Vec::with_capacity(conditions.len());
        let result = self.encode_bounds(conditions, &mut sessions).and_then(|bounds| {
            let predicates = conditions
                .iter()
                .zip(bounds)
                .map(|(c, b)| Predicate::compare(&c.column, c.op, b))
                .collect();
            self.query(&RangeQuery { predicates, projection })
        });
        if !sessions.is_empty() {
            self.cleanup(&sessions)?;
        }
        result
    }

    fn encode_bounds(&mut self, conditions: &[Condition], sessions: &mut Vec<SessionId>) -> Result<Vec<OrderBounds>> {
        let mut bounds = Vec::with_capacity(conditions.len());
        for (i, c) in conditions.iter().enumerate() {
            let o = self.encrypt(&c.column, &c.value)?;
            sessions.push(o.session);
            if o.rebalanced {
                // earlier bounds moved; they are in the table now, so asking
                // again lands on them without inserting anything
                for (j, prev) in conditions[..i].iter().enumerate() {
                    let again = self.encrypt(&prev.column, &prev.value)?;
                    sessions.push(again.session);
                    bounds[j] = again.bounds;
                }
            }
            bounds.push(o.bounds);
        }
        Ok(bounds)
    }
}
