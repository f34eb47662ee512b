//! Fixtures and plaintext oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::{Mutex, OnceLock};

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use oope::datastore::{ingest, Ingested};
use oope::homcrypto::{keygen_for_testing, PrivateKey};
use oope::integrity::{IntegrityMode, MacParams};
use oope::ope::{InitOptions, Mode, OpeStore, Order, Side, TableParams, TreeShape};
use oope::protocol::{Cluster, ClusterSpec, NodeTamper, ProtocolParams, TransportKind};

/// Cached test keys: prime search dominates otherwise.
pub fn key(bits: usize, seed: u64) -> PrivateKey {
    static CACHE: OnceLock<Mutex<Vec<((usize, u64), PrivateKey)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(Vec::new()));
    let mut c = cache.lock().unwrap();
    if let Some((_, k)) = c.iter().find(|(id, _)| *id == (bits, seed)) {
        return k.clone();
    }
    let (_, sk) = keygen_for_testing(bits, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
    c.push(((bits, seed), sk.clone()));
    sk
}

pub fn mac_params() -> MacParams {
    static MAC: OnceLock<MacParams> = OnceLock::new();
    MAC.get_or_init(|| MacParams::generate_for_testing(512, &mut ChaCha20Rng::seed_from_u64(77)).unwrap())
        .clone()
}

pub fn params(l: u32, table: TableParams, integrity: IntegrityMode) -> ProtocolParams {
    assert_eq!(l, table.l);
    ProtocolParams::new(table, 32, integrity, false).unwrap()
}

pub fn det(l: u32, log2m: u32) -> TableParams {
    TableParams::new(l, log2m, Mode::Deterministic).unwrap()
}

/// One-column CSV: `id,X1`.
pub fn csv(values: &[u64]) -> String {
    let mut s = String::from("id,X1\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("r{i},{v}\n"));
    }
    s
}

pub fn ingest_values(
    values: &[u64],
    params: &ProtocolParams,
    sk: &PrivateKey,
    mac: Option<&MacParams>,
    shape: TreeShape,
    seed: u64,
) -> Ingested {
    let opts = InitOptions {
        shape,
        integrity: params.integrity,
        mac_params: mac,
    };
    ingest(
        csv(values).as_bytes(),
        &["X1".to_string()],
        &params.table,
        sk,
        &opts,
        &mut ChaCha20Rng::seed_from_u64(seed),
    )
    .unwrap()
}

pub struct Setup {
    pub params: ProtocolParams,
    pub sk: PrivateKey,
    pub mac: Option<MacParams>,
    pub transport: TransportKind,
    pub shape: TreeShape,
    pub seed: u64,
}

impl Setup {
    pub fn new(params: ProtocolParams, key_bits: usize) -> Self {
        let mac = (params.integrity != IntegrityMode::Off).then(mac_params);
        Self {
            params,
            sk: key(key_bits, 1),
            mac,
            transport: TransportKind::Loopback,
            shape: TreeShape::Insertion,
            seed: 5,
        }
    }

    pub fn start(&self, values: &[u64], tamper: Option<Box<dyn NodeTamper>>) -> Cluster {
        let ing = ingest_values(values, &self.params, &self.sk, self.mac.as_ref(), self.shape, self.seed);
        let mut spec = ClusterSpec::new(self.params, self.transport);
        spec.csp_seed = self.seed + 1;
        spec.owner_seed = self.seed + 2;
        Cluster::start(spec, ing.database, ing.owner, self.sk.clone(), self.mac.clone(), tamper).unwrap()
    }
}

/// Plaintext behind every table entry, read with the owner's key.
pub fn plaintexts(store: &OpeStore, sk: &PrivateKey) -> Vec<(Order, u64)> {
    store
        .table()
        .iter()
        .map(|(&o, e)| {
            let c = e.value.cipher().expect("ciphertext entry");
            let v: u64 = sk.decrypt(c).unwrap().try_into().unwrap();
            (o, v)
        })
        .collect()
}

/// Result of inserting `x` into the plaintext replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleOrder {
    Existing(Order),
    New(Order),
    /// The gap was exhausted: every order is respaced, then the new value
    /// takes the midpoint of its respaced gap.
    Rebalanced(Order),
}

/// Sequential-insertion order of `x`, computed from plaintexts: walk the
/// tree by integer comparison, then take the midpoint of the gap.
pub fn oracle_order(store: &OpeStore, sk: &PrivateKey, x: u64) -> OracleOrder {
    let plain: std::collections::BTreeMap<Order, u64> = plaintexts(store, sk).into_iter().collect();
    let m = store.params().max_order;
    let Some(mut node) = store.root() else {
        return OracleOrder::New(m.div_ceil(2));
    };
    loop {
        let v = plain[&node];
        if x == v {
            return OracleOrder::Existing(node);
        }
        let side = if x > v { Side::Right } else { Side::Left };
        match store.child(node, side).unwrap() {
            Some(c) => node = c,
            None => {
                let (lo, hi) = match side {
                    Side::Left => (plain.range(..node).next_back().map_or(0, |(&o, _)| o), node),
                    Side::Right => (node, plain.range(node + 1..).next().map_or(m, |(&o, _)| o)),
                };
                if hi - lo >= 2 {
                    return OracleOrder::New(lo + (hi - lo).div_ceil(2));
                }
                // rank i of n moves to ceil(i * M / (n + 1))
                let n = plain.len() as u128;
                let spread = |o: Order| {
                    if o == 0 || o == m {
                        return o;
                    }
                    let rank = plain.range(..=o).count() as u128;
                    (rank * m).div_ceil(n + 1)
                };
                let (lo, hi) = (spread(lo), spread(hi));
                return OracleOrder::Rebalanced(lo + (hi - lo).div_ceil(2));
            }
        }
    }
}

/// Neighbours of `order` bracket `x`.
pub fn sandwiched(store: &OpeStore, sk: &PrivateKey, order: Order, x: u64) -> bool {
    let plain = plaintexts(store, sk);
    let below = plain.iter().filter(|(o, _)| *o < order).map(|p| p.1).next_back();
    let above = plain.iter().find(|(o, _)| *o > order).map(|p| p.1);
    below.is_none_or(|b| b <= x) && above.is_none_or(|a| x <= a)
}

/// Session records once the server has logged at least `n`; aborts are
/// recorded asynchronously.
pub fn wait_records(cluster: &Cluster, n: usize) -> Vec<oope::protocol::SessionRecord> {
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(10);
    loop {
        let r = cluster.records();
        if r.len() >= n || std::time::Instant::now() > deadline {
            return r;
        }
        std::thread::sleep(std::time::Duration::from_millis(5));
    }
}

pub fn big(v: u64) -> BigUint {
    BigUint::from(v)
}
