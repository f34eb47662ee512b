//! All three parties in one process, for tests and benchmarks. The server
//! and owner run on their own threads; analysts are driven by the caller.

use std::collections::BTreeMap;
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::analyst::{Analyst, AnalystConfig};
use super::csp::{serve_csp, CspServer, NodeTamper, SessionHook, SessionRecord};
use super::metrics::Metrics;
use super::owner::{serve_owner, OwnerDaemon, OwnerStates};
use super::ProtocolParams;
use crate::datastore::Database;
use crate::error::{Error, Result};
use crate::homcrypto::{PrivateKey, PublicKey};
use crate::integrity::MacParams;
use crate::ope::OwnerState;
use crate::transport::{handshake, loopback, tcp, Endpoint, Role, Transcript};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Loopback,
    /// Real sockets on 127.0.0.1.
    Tcp,
}

#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub params: ProtocolParams,
    pub transport: TransportKind,
    pub csp_seed: u64,
    pub owner_seed: u64,
    /// Nonces the server precomputes before the first session.
    pub csp_pool_prefill: usize,
    pub metrics: Option<Metrics>,
}

impl ClusterSpec {
    pub fn new(params: ProtocolParams, transport: TransportKind) -> Self {
        Self {
            params,
            transport,
            csp_seed: 1,
            owner_seed: 2,
            csp_pool_prefill: 0,
            metrics: None,
        }
    }
}

/// Every frame sent on each directed link, in order.
#[derive(Debug, Clone, Default)]
pub struct ClusterTranscripts {
    pub csp_to_owner: Transcript,
    pub owner_to_csp: Transcript,
    pub csp_to_analyst: Transcript,
    pub analyst_to_csp: Transcript,
    pub owner_to_analyst: Transcript,
    pub analyst_to_owner: Transcript,
}

impl ClusterTranscripts {
    /// All links, labelled, in a fixed order.
    pub fn links(&self) -> [(&'static str, &Transcript); 6] {
        [
            ("csp->owner", &self.csp_to_owner),
            ("owner->csp", &self.owner_to_csp),
            ("csp->analyst", &self.csp_to_analyst),
            ("analyst->csp", &self.analyst_to_csp),
            ("owner->analyst", &self.owner_to_analyst),
            ("analyst->owner", &self.analyst_to_owner),
        ]
    }
}

struct TcpListeners {
    csp: tcp::Listener,
    owner: tcp::Listener,
}

pub struct Cluster {
    spec: ClusterSpec,
    owner_key: PublicKey,
    mac: Option<MacParams>,
    db: Arc<RwLock<Database>>,
    owner_states: OwnerStates,
    records: Arc<Mutex<Vec<SessionRecord>>>,
    transcripts: ClusterTranscripts,
    to_csp: Option<Sender<Endpoint>>,
    to_owner: Option<Sender<Endpoint>>,
    threads: Vec<JoinHandle<Result<()>>>,
    listeners: Option<TcpListeners>,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cluster").field("spec", &self.spec).finish_non_exhaustive()
    }
}

fn link(kind: TransportKind, a: Role, b: Role, listener: Option<&tcp::Listener>) -> Result<(Endpoint, Endpoint)> {
    match kind {
        TransportKind::Loopback => Ok(loopback::pair(a, b)),
        TransportKind::Tcp => {
            let listener = listener.ok_or_else(|| Error::Config("listener missing".into()))?;
            let addr = listener.local_addr()?.to_string();
            let ea = tcp::connect(&addr, a, Duration::from_secs(5))?;
            let eb = listener.accept()?;
            Ok((ea, eb))
        }
    }
}

impl Cluster {
    pub fn start(
        spec: ClusterSpec,
        db: Database,
        owner_states: BTreeMap<String, OwnerState>,
        owner_sk: PrivateKey,
        mac: Option<MacParams>,
        tamper: Option<Box<dyn NodeTamper>>,
    ) -> Result<Self> {
        Self::start_with_hook(spec, db, owner_states, owner_sk, mac, tamper, None)
    }

    pub fn start_with_hook(
        spec: ClusterSpec,
        db: Database,
        owner_states: BTreeMap<String, OwnerState>,
        owner_sk: PrivateKey,
        mac: Option<MacParams>,
        tamper: Option<Box<dyn NodeTamper>>,
        hook: Option<Box<dyn SessionHook>>,
    ) -> Result<Self> {
        let transcripts = ClusterTranscripts::default();
        let listeners = match spec.transport {
            TransportKind::Loopback => None,
            TransportKind::Tcp => Some(TcpListeners {
                csp: tcp::Listener::bind("127.0.0.1:0", Role::Csp)?,
                owner: tcp::Listener::bind("127.0.0.1:0", Role::Owner)?,
            }),
        };

        let (mut owner_side, mut csp_side) =
            link(spec.transport, Role::Owner, Role::Csp, listeners.as_ref().map(|l| &l.csp))?;
        owner_side.record_into(transcripts.owner_to_csp.clone());
        csp_side.record_into(transcripts.csp_to_owner.clone());
        let digest = spec.params.digest();
        let peer = thread::spawn(move || handshake(&mut owner_side, &digest, &[Role::Csp]).map(|_| owner_side));
        handshake(&mut csp_side, &digest, &[Role::Owner])?;
        let mut owner_side = peer
            .join()
            .map_err(|_| Error::Protocol("owner handshake thread panicked".into()))??;

        let owner_key = owner_sk.public_key().clone();
        let db = Arc::new(RwLock::new(db));
        let mut csp = CspServer::new(spec.params, owner_key.clone(), Arc::clone(&db), csp_side, spec.csp_seed)?;
        if let Some(t) = tamper {
            csp = csp.with_tamper(t);
        }
        if let Some(h) = hook {
            csp = csp.with_hook(h);
        }
        if let Some(m) = &spec.metrics {
            csp = csp.with_metrics(m.clone());
        }
        csp.prefill_pool(spec.csp_pool_prefill)?;
        let records = csp.records();

        let owner_states: OwnerStates = Arc::new(Mutex::new(owner_states));
        let mut owner = OwnerDaemon::new(spec.params, owner_sk, mac.clone(), Arc::clone(&owner_states), spec.owner_seed)?;
        if let Some(m) = &spec.metrics {
            owner = owner.with_metrics(m.clone());
        }

        let (to_csp, mut csp_rx) = channel::<Endpoint>();
        let (to_owner, mut owner_rx) = channel::<Endpoint>();
        let threads = vec![
            thread::Builder::new()
                .name("csp".into())
                .spawn(move || serve_csp(&mut csp, &mut csp_rx))?,
            thread::Builder::new()
                .name("owner".into())
                .spawn(move || serve_owner(&mut owner, &mut owner_side, &mut owner_rx))?,
        ];
        Ok(Self {
            spec,
            owner_key,
            mac,
            db,
            owner_states,
            records,
            transcripts,
            to_csp: Some(to_csp),
            to_owner: Some(to_owner),
            threads,
            listeners,
        })
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.spec.params
    }

    pub fn owner_key(&self) -> &PublicKey {
        &self.owner_key
    }

    /// Configuration for an analyst of this cluster.
    pub fn analyst_config(&self, key: Option<PrivateKey>, id: [u8; 32], seed: u64) -> AnalystConfig {
        AnalystConfig {
            params: self.spec.params,
            owner_key: self.owner_key.clone(),
            mac: self.mac.clone(),
            key,
            id,
            seed,
        }
    }

    /// Opens fresh links to both servers and completes the handshakes. The
    /// servers handle one analyst at a time: drop the previous one first.
    pub fn connect(&self, config: AnalystConfig) -> Result<Analyst> {
        let closed = || Error::Protocol("cluster is shut down".into());
        let kind = self.spec.transport;
        let l = self.listeners.as_ref();
        let (mut a_csp, mut csp_end) = link(kind, Role::Analyst, Role::Csp, l.map(|l| &l.csp))?;
        let (mut a_owner, mut owner_end) = link(kind, Role::Analyst, Role::Owner, l.map(|l| &l.owner))?;
        a_csp.record_into(self.transcripts.analyst_to_csp.clone());
        csp_end.record_into(self.transcripts.csp_to_analyst.clone());
        a_owner.record_into(self.transcripts.analyst_to_owner.clone());
        owner_end.record_into(self.transcripts.owner_to_analyst.clone());
        self.to_csp.as_ref().ok_or_else(closed)?.send(csp_end).map_err(|_| closed())?;
        self.to_owner.as_ref().ok_or_else(closed)?.send(owner_end).map_err(|_| closed())?;
        let analyst = Analyst::connect(config, a_csp, a_owner)?;
        Ok(match &self.spec.metrics {
            Some(m) => analyst.with_metrics(m.clone()),
            None => analyst,
        })
    }

    /// Shortcut for a deterministic-mode analyst.
    pub fn connect_analyst(&self, seed: u64) -> Result<Analyst> {
        self.connect(self.analyst_config(None, [0; 32], seed))
    }

    pub fn database(&self) -> Arc<RwLock<Database>> {
        Arc::clone(&self.db)
    }

    pub fn owner_states(&self) -> OwnerStates {
        Arc::clone(&self.owner_states)
    }

    pub fn records(&self) -> Vec<SessionRecord> {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn transcripts(&self) -> &ClusterTranscripts {
        &self.transcripts
    }

    /// Stops accepting analysts and waits for both server threads. Every
    /// analyst must have been dropped.
    pub fn shutdown(mut self) -> Result<()> {
        self.to_csp = None;
        self.to_owner = None;
        let mut first_err = None;
        for t in self.threads.drain(..) {
            match t.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                Err(_) => {
                    first_err.get_or_insert(Error::Protocol("server thread panicked".into()));
                }
            }
        }
        first_err.map_or(Ok(()), Err)
    }
}
