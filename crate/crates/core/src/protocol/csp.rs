//! Storage server: drives traversal, reconstructs comparison bits, commits
//! inserts and answers range queries.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::messages::{self, BoundSide, Close, MinmaxTriple, OpenAtServer, RandomOffset, RandomizedNode, Upload};
use super::metrics::{Metrics, Phase};
use super::round::{combine_shares, Shares};
use super::ProtocolParams;
use crate::datastore::{Database, RangeQuery};
use crate::error::{AbortReason, Error, Result};
use crate::homcrypto::{HomCiphertext, PublicKey, RandomnessPool};
use crate::integrity::{IntegrityMode, NodeTag};
use crate::ope::{InsertionPlan, Mode, NodeValue, OpeEntry, Order, Origin, Side};
use crate::transport::{handshake, tcp, Endpoint, MessageType, Role, SessionId};

/// Test instrumentation: lets a dishonest server replace the node it sends
/// in a round. Returns the substitute ciphertext and, under Pedersen
/// commitments, a substitute blinding ciphertext.
pub trait NodeTamper: Send {
    fn substitute(
        &mut self,
        round: u32,
        entry: &OpeEntry,
        pk: &PublicKey,
        rng: &mut ChaCha20Rng,
    ) -> Option<(HomCiphertext, Option<HomCiphertext>)>;
}

/// Host callback consulted when an analyst opens a session. `count`
/// includes the session being opened. Returning false refuses it.
pub trait SessionHook: Send {
    fn admit(&mut self, analyst: &[u8; 32], count: u64) -> bool;
}

/// What the server learned in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundBits {
    /// Deterministic mode: `[x̄ != x]` and `[x̄ > x]`.
    Compare { differs: bool, greater: bool },
    /// Frequency-hiding mode: only the traversal direction.
    Direction(bool),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionOutcome {
    /// A new entry was committed at `order`.
    Inserted,
    /// The value matched an existing entry; nothing was stored.
    Matched,
    Aborted(AbortReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub session: SessionId,
    pub analyst: [u8; 32],
    pub column: String,
    pub rounds: usize,
    /// Tree height when the session started.
    pub height: usize,
    pub order: Option<Order>,
    pub rebalanced: bool,
    pub bits: Vec<RoundBits>,
    pub outcome: SessionOutcome,
}

#[derive(Debug, Clone, Copy)]
enum Landing {
    Equal(Order),
    Nil(Order, Side),
}

fn random_unit(n: &BigUint, rng: &mut ChaCha20Rng) -> BigUint {
    loop {
        let s = rng.gen_biguint_below(n);
        if !s.is_zero() && s.gcd(n).is_one() {
            return s;
        }
    }
}

pub struct CspServer {
    params: ProtocolParams,
    pk: PublicKey,
    db: Arc<RwLock<Database>>,
    owner: Endpoint,
    pool: Arc<RandomnessPool>,
    rng: ChaCha20Rng,
    tamper: Option<Box<dyn NodeTamper>>,
    hook: Option<Box<dyn SessionHook>>,
    counts: BTreeMap<[u8; 32], u64>,
    records: Arc<Mutex<Vec<SessionRecord>>>,
    metrics: Option<Metrics>,
}

impl std::fmt::Debug for CspServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CspServer").field("params", &self.params).finish_non_exhaustive()
    }
}

/// Per-session working state.
struct Session<'a> {
    id: SessionId,
    da: &'a mut Endpoint,
    column: String,
    analyst_key: Option<PublicKey>,
}

impl CspServer {
    /// `owner` must already have completed its handshake with the owner.
    pub fn new(params: ProtocolParams, pk: PublicKey, db: Arc<RwLock<Database>>, owner: Endpoint, seed: u64) -> Result<Self> {
        params.check_key(&pk)?;
        let pool = Arc::new(RandomnessPool::new(&pk));
        Ok(Self {
            params,
            pk,
            db,
            owner,
            pool,
            rng: ChaCha20Rng::seed_from_u64(seed),
            tamper: None,
            hook: None,
            counts: BTreeMap::new(),
            records: Arc::new(Mutex::new(Vec::new())),
            metrics: None,
        })
    }

    pub fn with_tamper(mut self, tamper: Box<dyn NodeTamper>) -> Self {
        self.tamper = Some(tamper);
        self
    }

    pub fn with_hook(mut self, hook: Box<dyn SessionHook>) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn with_metrics(mut self, metrics: Metrics) -> Self {
        self.metrics = Some(metrics);
        self
    }

    /// Precomputes `count` encryption nonces for the owner's key.
    pub fn prefill_pool(&mut self, count: usize) -> Result<()> {
        self.pool.fill(&self.pk, count, &mut self.rng)
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn records(&self) -> Arc<Mutex<Vec<SessionRecord>>> {
        Arc::clone(&self.records)
    }

    pub fn database(&self) -> Arc<RwLock<Database>> {
        Arc::clone(&self.db)
    }

    /// Session counts per analyst id.
    pub fn session_counts(&self) -> &BTreeMap<[u8; 32], u64> {
        &self.counts
    }

    /// Serves one analyst link until it closes.
    pub fn serve_analyst(&mut self, da: &mut Endpoint) -> Result<()> {
        loop {
            let frame = match da.recv_any() {
                Ok(f) => f,
                Err(Error::ChannelClosed) => return Ok(()),
                Err(e) => return Err(e),
            };
            match frame.msg_type {
                MessageType::SessionOpen => {
                    if let Err(e) = self.run_session(da, frame.session, &frame.payload) {
                        log::warn!("session {} aborted: {e}", frame.session);
                    }
                }
                MessageType::Query => {
                    let reply = self.answer_query(&frame.payload);
                    da.send_msg(frame.session, MessageType::QueryResult, messages::encode_reply(reply))?;
                }
                MessageType::Cleanup => {
                    let reply = messages::decode_sessions(&frame.payload).map(|sessions| {
                        let removed = self.db.write().unwrap_or_else(|e| e.into_inner()).cleanup(&sessions);
                        (removed as u64).to_be_bytes().to_vec()
                    });
                    da.send_msg(
                        frame.session,
                        MessageType::CleanupAck,
                        messages::encode_reply(reply.map_err(|e| e.to_string())),
                    )?;
                }
                MessageType::Abort => {}
                other => log::debug!("ignoring stray {other:?} frame for session {}", frame.session),
            }
        }
    }

    fn answer_query(&self, payload: &[u8]) -> std::result::Result<Vec<u8>, String> {
        let query: RangeQuery = serde_json::from_slice(payload).map_err(|e| format!("malformed query: {e}"))?;
        let db = self.db.read().unwrap_or_else(|e| e.into_inner());
        let result = db.exec_range(&query).map_err(|e| e.to_string())?;
        serde_json::to_vec(&result).map_err(|e| e.to_string())
    }

    fn run_session(&mut self, da: &mut Endpoint, id: SessionId, payload: &[u8]) -> Result<()> {
        let start = self.metrics.as_ref().map(Metrics::now);
        let mut record = SessionRecord {
            session: id,
            analyst: [0; 32],
            column: String::new(),
            rounds: 0,
            height: 0,
            order: None,
            rebalanced: false,
            bits: Vec::new(),
            outcome: SessionOutcome::Aborted(AbortReason::Unspecified),
        };
        let result = self.session_body(da, id, payload, &mut record);
        if let Err(e) = &result {
            let reason = e.abort_reason();
            da.send_abort(id, reason);
            self.owner.send_abort(id, reason);
            record.outcome = SessionOutcome::Aborted(reason);
        }
        da.forget(id);
        self.owner.forget(id);
        if let (Some(m), Some(start)) = (&self.metrics, start) {
            m.record(super::metrics::PhaseSample {
                session: id,
                round: record.rounds as u32,
                role: Role::Csp,
                phase: Phase::Session,
                elapsed: m.now().saturating_sub(start),
            });
        }
        self.records.lock().unwrap_or_else(|e| e.into_inner()).push(record);
        result
    }

    fn session_body(&mut self, da: &mut Endpoint, id: SessionId, payload: &[u8], record: &mut SessionRecord) -> Result<()> {
        let open = OpenAtServer::decode(payload)?;
        record.analyst = open.analyst;
        record.column = open.column.clone();
        let count = self.counts.entry(open.analyst).or_insert(0);
        *count += 1;
        let count = *count;
        if let Some(hook) = self.hook.as_mut() {
            if !hook.admit(&open.analyst, count) {
                return Err(Error::RateLimited);
            }
        }
        let analyst_key = match (self.params.mode(), open.analyst_key) {
            (Mode::FrequencyHiding, Some(n)) => {
                let key = PublicKey::from_modulus(n)?;
                if key.n() <= self.pk.n() {
                    return Err(Error::Protocol("analyst modulus must exceed the owner modulus".into()));
                }
                Some(key)
            }
            (Mode::FrequencyHiding, None) => return Err(Error::Protocol("frequency-hiding session without analyst key".into())),
            (Mode::Deterministic, _) => None,
        };
        let mut s = Session {
            id,
            da,
            column: open.column,
            analyst_key,
        };

        let (height, root) = {
            let db = self.db.read().unwrap_or_else(|e| e.into_inner());
            let store = db.store(&s.column)?;
            (store.height(), store.root())
        };
        record.height = height;

        let mut landing: Option<Landing> = None;
        let mut node = root;
        for round in 0..height as u32 {
            let current = node.ok_or_else(|| Error::Protocol("traversal left the tree".into()))?;
            let bits = self.compare_round(&mut s, round, current)?;
            record.rounds += 1;
            record.bits.push(bits);
            if landing.is_some() {
                continue;
            }
            let greater = match bits {
                RoundBits::Compare { differs: false, .. } => {
                    landing = Some(Landing::Equal(current));
                    continue;
                }
                RoundBits::Compare { greater, .. } => greater,
                RoundBits::Direction(b) => b,
            };
            let side = Side::from_greater(greater);
            let child = {
                let db = self.db.read().unwrap_or_else(|e| e.into_inner());
                db.store(&s.column)?.child(current, side)?
            };
            match child {
                Some(c) => node = Some(c),
                None => landing = Some(Landing::Nil(current, side)),
            }
        }

        let plan = {
            let db = self.db.read().unwrap_or_else(|e| e.into_inner());
            let store = db.store(&s.column)?;
            match landing {
                Some(Landing::Equal(_)) => None,
                Some(Landing::Nil(o, side)) => {
                    Some(store.plan_insert(Some((o, side)), self.params.mode() == Mode::Deterministic)?)
                }
                None if store.is_empty() => Some(store.plan_insert(None, false)?),
                None => return Err(Error::Protocol("traversal ended without landing".into())),
            }
        };
        let (order, rebalanced) = match (&plan, landing) {
            (Some(p), _) => (p.order, p.remap.is_some()),
            (None, Some(Landing::Equal(o))) => (o, false),
            (None, _) => unreachable!("plan is absent only on an equal landing"),
        };
        record.order = Some(order);
        record.rebalanced = rebalanced;

        s.da.send_msg(id, MessageType::OrderResult, messages::encode_order_result(order, rebalanced))?;
        let upload = Upload::decode(&s.da.recv(id, &[MessageType::CipherUpload])?.payload)?;
        let (value, tag) = self.check_upload(upload)?;

        let Some(plan) = plan else {
            self.close(&mut s, None, false)?;
            record.outcome = SessionOutcome::Matched;
            return Ok(());
        };

        let mut entry = OpeEntry {
            value,
            order: plan.order,
            fh_min: None,
            fh_max: None,
            tag,
            origin: Origin::Analyst(id),
        };
        if self.params.mode() == Mode::FrequencyHiding {
            let (lo, hi) = self.min_max(&mut s, &entry, plan.order)?;
            entry.fh_min = Some(lo);
            entry.fh_max = Some(hi);
        }
        self.db
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .commit_insert(&s.column, entry, &plan)?;
        self.close(&mut s, Some(&plan), rebalanced)?;
        record.outcome = SessionOutcome::Inserted;
        Ok(())
    }

    fn close(&mut self, s: &mut Session<'_>, plan: Option<&InsertionPlan>, rebalanced: bool) -> Result<()> {
        let remap = plan
            .and_then(|p| p.remap.as_ref())
            .map(|r| r.pairs().to_vec())
            .unwrap_or_default();
        let to_owner = Close {
            column: s.column.clone(),
            rebalanced,
            remap,
        };
        self.owner.send_msg(s.id, MessageType::SessionClose, to_owner.encode())?;
        let to_analyst = Close {
            column: s.column.clone(),
            rebalanced,
            remap: Vec::new(),
        };
        s.da.send_msg(s.id, MessageType::SessionClose, to_analyst.encode())
    }

    fn check_upload(&self, upload: Upload) -> Result<(NodeValue, Option<NodeTag>)> {
        let Upload::Value { value, tag } = upload else {
            return Err(Error::Protocol("expected a value upload".into()));
        };
        match (&value, self.params.uid) {
            (NodeValue::Cipher(c), false) => self.pk.check_key(c)?,
            (NodeValue::Uid(_), true) => {}
            _ => return Err(Error::Protocol("upload kind does not match the session profile".into())),
        }
        let tag_mode = tag.as_ref().map_or(IntegrityMode::Off, NodeTag::mode);
        if tag_mode != self.params.integrity {
            return Err(Error::Protocol(format!("upload carries a {tag_mode} tag, table uses {}", self.params.integrity)));
        }
        if let Some(NodeTag::Pedersen { blinding, .. }) = &tag {
            self.pk.check_key(blinding)?;
        }
        Ok((value, tag))
    }

    fn node_cipher(&mut self, s: &mut Session<'_>, round: u32, entry: &OpeEntry) -> Result<HomCiphertext> {
        match &entry.value {
            NodeValue::Cipher(c) => Ok(c.clone()),
            NodeValue::Uid(uid) => {
                s.da.send_msg(s.id, MessageType::UidProbe, messages::encode_uid_probe(round, uid))?;
                let reply = messages::decode_uid_reply(&s.da.recv(s.id, &[MessageType::UidProbe])?.payload)?;
                self.pk.check_key(&reply)?;
                Ok(reply)
            }
        }
    }

    fn compare_round(&mut self, s: &mut Session<'_>, round: u32, node: Order) -> Result<RoundBits> {
        let start = self.metrics.as_ref().map(Metrics::now);
        let entry = {
            let db = self.db.read().unwrap_or_else(|e| e.into_inner());
            db.store(&s.column)?.entry(node)?.clone()
        };
        let mut cipher = self.node_cipher(s, round, &entry)?;
        let mut blinding = match &entry.tag {
            Some(NodeTag::Pedersen { blinding, .. }) => Some(blinding.clone()),
            _ => None,
        };
        if let Some(t) = self.tamper.as_mut() {
            if let Some((c, b)) = t.substitute(round, &entry, &self.pk, &mut self.rng) {
                cipher = c;
                if b.is_some() {
                    blinding = b;
                }
            }
        }

        let r = self.rng.gen_biguint(self.params.offset_bits());
        let enc_r = self.pk.encrypt(&r, Some(&self.pool), &mut self.rng)?;
        let node_blinded = self.pk.hom_add(&cipher, &enc_r)?;
        let (r2, blinding) = match (self.params.integrity, blinding) {
            (IntegrityMode::Pedersen, Some(b)) => {
                let r2 = self.rng.gen_biguint(self.params.pedersen_offset_bits());
                let enc = self.pk.encrypt(&r2, Some(&self.pool), &mut self.rng)?;
                (Some(r2), Some(self.pk.hom_add(&b, &enc)?))
            }
            (IntegrityMode::Pedersen, None) => return Err(Error::Integrity(format!("node {node} has no commitment"))),
            _ => (None, None),
        };
        let tag_value = match (&entry.tag, self.params.integrity) {
            (_, IntegrityMode::Off) => None,
            (Some(NodeTag::DlMac(m)), IntegrityMode::DlMac) => Some(m.clone()),
            (Some(NodeTag::Pedersen { commitment, .. }), IntegrityMode::Pedersen) => Some(commitment.clone()),
            _ => return Err(Error::Integrity(format!("node {node} lacks a matching tag"))),
        };

        let width = self.pk.ciphertext_width();
        let msg = RandomizedNode {
            round,
            node: node_blinded,
            blinding,
        };
        self.owner.send_msg(s.id, MessageType::RandomizedNode, msg.encode(width))?;
        let layout_tag_width = {
            let db = self.db.read().unwrap_or_else(|e| e.into_inner());
            db.store(&s.column)?.layout().tag_width
        };
        let offset = RandomOffset {
            round,
            r,
            r2,
            tag: tag_value,
        };
        let r_width = self.params.offset_bits().div_ceil(8) as usize;
        let r2_width = self.params.pedersen_offset_bits().div_ceil(8) as usize;
        s.da.send_msg(s.id, MessageType::RandomOffset, offset.encode(r_width, r2_width, layout_tag_width))?;

        let slots = if self.params.mode() == Mode::FrequencyHiding { 1 } else { 2 };
        let (ra, a) = messages::decode_shares(&s.da.recv(s.id, &[MessageType::Shares])?.payload)?;
        let (ro, o) = messages::decode_shares(&self.owner.recv(s.id, &[MessageType::Shares])?.payload)?;
        if ra != round || ro != round {
            return Err(Error::Protocol(format!("shares for round {ra}/{ro}, expected {round}")));
        }
        let bits = combine_shares(round as usize, &Shares::from_byte(a, slots)?, &Shares::from_byte(o, slots)?, slots)?;
        if let (Some(m), Some(start)) = (&self.metrics, start) {
            m.record(super::metrics::PhaseSample {
                session: s.id,
                round,
                role: Role::Csp,
                phase: Phase::Round,
                elapsed: m.now().saturating_sub(start),
            });
        }
        Ok(match slots {
            1 => RoundBits::Direction(bits[0]),
            _ => RoundBits::Compare {
                differs: bits[0],
                greater: bits[1],
            },
        })
    }

    /// Blinded selection of the new entry's duplicate range.
    fn min_max(&mut self, s: &mut Session<'_>, entry: &OpeEntry, order: Order) -> Result<(HomCiphertext, HomCiphertext)> {
        let analyst_key = s
            .analyst_key
            .clone()
            .ok_or_else(|| Error::Protocol("missing analyst key".into()))?;
        let x = entry
            .value
            .cipher()
            .ok_or_else(|| Error::Protocol("frequency-hiding entries need a ciphertext".into()))?
            .clone();
        let (pred, succ) = {
            let db = self.db.read().unwrap_or_else(|e| e.into_inner());
            let table = db.store(&s.column)?.table();
            (
                table.range(..order).next_back().map(|(_, e)| e.clone()),
                table.range(order + 1..).next().map(|(_, e)| e.clone()),
            )
        };
        let n = self.pk.n().clone();
        let mut randoms = Vec::with_capacity(2);
        for (side, nb) in [(BoundSide::Min, pred), (BoundSide::Max, succ)] {
            let scale = random_unit(&n, &mut self.rng);
            let r = random_unit(&n, &mut self.rng);
            let (diff, bound) = match nb {
                Some(e) => {
                    let c = e
                        .value
                        .cipher()
                        .ok_or_else(|| Error::Protocol("neighbour without ciphertext".into()))?;
                    let bound = match side {
                        BoundSide::Min => e.fh_min.as_ref(),
                        BoundSide::Max => e.fh_max.as_ref(),
                    }
                    .ok_or_else(|| Error::Protocol(format!("neighbour {} lacks duplicate bounds", e.order)))?;
                    let diff = self.pk.hom_scale(&self.pk.hom_sub(c, &x)?, &scale)?;
                    (diff, self.pk.hom_scale(bound, &r)?)
                }
                None => {
                    // virtual bound: a nonzero difference forces the order branch
                    let d = random_unit(&n, &mut self.rng);
                    let filler = self.rng.gen_biguint_below(&n);
                    (
                        self.pk.encrypt(&d, Some(&self.pool), &mut self.rng)?,
                        self.pk.encrypt(&filler, Some(&self.pool), &mut self.rng)?,
                    )
                }
            };
            let yr = BigUint::from(order) * &r % &n;
            let triple = MinmaxTriple {
                side,
                diff,
                order_blinded: analyst_key.encrypt(&yr, None, &mut self.rng)?,
                bound_blinded: bound,
            };
            self.owner.send_msg(
                s.id,
                MessageType::MinmaxTriple,
                triple.encode(self.pk.ciphertext_width(), analyst_key.ciphertext_width()),
            )?;
            randoms.push(r);
        }
        let width = self.pk.n().bits().div_ceil(8) as usize;
        s.da.send_msg(s.id, MessageType::MinmaxRandoms, messages::encode_minmax_randoms(&randoms[0], &randoms[1], width))?;
        match Upload::decode(&s.da.recv(s.id, &[MessageType::CipherUpload])?.payload)? {
            Upload::Bounds { min, max } => {
                self.pk.check_key(&min)?;
                self.pk.check_key(&max)?;
                Ok((min, max))
            }
            _ => Err(Error::Protocol("expected a bounds upload".into())),
        }
    }
}

/// Source of analyst connections for [`serve_csp`].
pub trait Acceptor {
    fn accept(&mut self) -> Result<Option<Endpoint>>;
}

impl Acceptor for tcp::Listener {
    fn accept(&mut self) -> Result<Option<Endpoint>> {
        tcp::Listener::accept(self).map(Some)
    }
}

impl Acceptor for std::sync::mpsc::Receiver<Endpoint> {
    fn accept(&mut self) -> Result<Option<Endpoint>> {
        Ok(self.recv().ok())
    }
}

/// Accepts analyst links one after another and serves each until it
/// closes. Returns when the acceptor is exhausted.
pub fn serve_csp<A: Acceptor>(server: &mut CspServer, acceptor: &mut A) -> Result<()> {
    let digest = server.params.digest();
    while let Some(mut ep) = acceptor.accept()? {
        match handshake(&mut ep, &digest, &[Role::Analyst]) {
            Ok(_) => {
                if let Err(e) = server.serve_analyst(&mut ep) {
                    log::warn!("analyst link ended: {e}");
                }
            }
            Err(e) => log::warn!("rejected analyst connection: {e}"),
        }
    }
    Ok(())
}
