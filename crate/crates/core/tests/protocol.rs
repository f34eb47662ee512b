mod common;

use std::collections::BTreeSet;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use common::*;
use oope::datastore::{CmpOp, Condition, Projection, QueryResult};
use oope::homcrypto::{HomCiphertext, PublicKey};
use oope::integrity::IntegrityMode;
use oope::ope::{Mode, OpeEntry, TableParams, TreeShape};
use oope::protocol::{
    ClusterSpec, Cluster, NodeTamper, ProtocolParams, RoundBits, SessionHook, SessionOutcome, TransportKind,
};
use oope::transport::MessageType;
use oope::{AbortReason, Error};

fn example_setup() -> Setup {
    let table = TableParams::with_max_order(16, 28, Mode::Deterministic).unwrap();
    Setup::new(params(16, table, IntegrityMode::Off), 512)
}

#[test]
fn example_values_get_expected_orders() {
    let setup = example_setup();
    let cluster = setup.start(&[32, 20, 25, 69, 10], None);
    let mut da = cluster.connect_analyst(9).unwrap();

    let hit = da.encrypt("X1", &big(25)).unwrap();
    assert_eq!(hit.order, 11);
    assert_eq!(hit.rounds, 3);
    let mid = da.encrypt("X1", &big(15)).unwrap();
    assert_eq!(mid.order, 6);
    let top = da.encrypt("X1", &big(100)).unwrap();
    assert_eq!(top.order, 25);

    let lt32 = Condition {
        column: "X1".into(),
        op: CmpOp::Lt,
        value: big(32),
    };
    assert_eq!(da.range_query(&[lt32], Projection::Count).unwrap(), QueryResult::Count(3));

    let records = cluster.records();
    assert_eq!(records[0].outcome, SessionOutcome::Matched);
    assert_eq!(records[1].outcome, SessionOutcome::Inserted);
    assert!(records.iter().all(|r| r.rounds == r.height));
    // 25 sits at depth 2 below 32 and 20
    assert!(matches!(records[0].bits[1], RoundBits::Compare { differs: true, greater: true }));
    assert_eq!(
        records[0].bits[2],
        RoundBits::Compare {
            differs: false,
            greater: false
        }
    );
    drop(da);
    cluster.shutdown().unwrap();
}

#[test]
fn matches_plaintext_oracle_on_random_tables() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    // a small order space forces some respacing
    let table = TableParams::with_max_order(16, 61, Mode::Deterministic).unwrap();
    let mut setup = Setup::new(params(16, table, IntegrityMode::Off), 512);
    let mut rebalances = 0;
    for dataset in 0..6 {
        let n = rng.gen_range(0..40);
        let values: Vec<u64> = (0..n).map(|_| rng.gen_range(0..1 << 16)).collect();
        setup.seed = dataset;
        let cluster = setup.start(&values, None);
        let mut da = cluster.connect_analyst(dataset).unwrap();
        for q in 0..5 {
            let x = if q % 2 == 0 && !values.is_empty() {
                values[rng.gen_range(0..values.len())]
            } else {
                rng.gen_range(0..1 << 16)
            };
            let expected = {
                let db = cluster.database();
                let db = db.read().unwrap();
                oracle_order(db.store("X1").unwrap(), &setup.sk, x)
            };
            let got = da.encrypt("X1", &big(x)).unwrap();
            match expected {
                OracleOrder::Existing(o) | OracleOrder::New(o) => {
                    assert_eq!(got.order, o, "x={x}");
                    assert!(!got.rebalanced);
                }
                OracleOrder::Rebalanced(o) => {
                    assert_eq!(got.order, o, "x={x}");
                    assert!(got.rebalanced);
                    rebalances += 1;
                }
            }
            let db = cluster.database();
            let db = db.read().unwrap();
            assert!(sandwiched(db.store("X1").unwrap(), &setup.sk, got.order, x));
        }
        assert!(cluster.records().iter().all(|r| r.rounds == r.height));
        drop(da);
        cluster.shutdown().unwrap();
    }
    assert!(rebalances > 0);
}

#[test]
fn empty_and_single_entry_tables() {
    let setup = Setup::new(params(16, det(16, 32), IntegrityMode::Off), 512);
    let cluster = setup.start(&[], None);
    let mut da = cluster.connect_analyst(1).unwrap();
    let first = da.encrypt("X1", &big(7)).unwrap();
    assert_eq!(first.rounds, 0);
    assert_eq!(first.order, (1u128 << 32) / 2);
    let second = da.encrypt("X1", &big(3)).unwrap();
    assert_eq!(second.rounds, 1);
    assert!(second.order < first.order);
    drop(da);
    cluster.shutdown().unwrap();
}

#[test]
fn rebalance_reaches_owner_and_rows() {
    // M = 16 leaves room for few inserts before respacing
    let table = TableParams::with_max_order(16, 16, Mode::Deterministic).unwrap();
    let setup = Setup::new(params(16, table, IntegrityMode::Off), 512);
    let cluster = setup.start(&[50, 10, 90], None);
    let mut da = cluster.connect_analyst(3).unwrap();
    let mut rebalanced = false;
    for x in [40u64, 45, 47] {
        rebalanced |= da.encrypt("X1", &big(x)).unwrap().rebalanced;
    }
    assert!(rebalanced);
    drop(da);
    let db = cluster.database();
    let db = db.read().unwrap();
    let store = db.store("X1").unwrap();
    let owner = cluster.owner_states();
    let owner = owner.lock().unwrap();
    for (order, v) in owner["X1"].iter() {
        let c = store.entry(order).unwrap().value.cipher().unwrap();
        assert_eq!(&setup.sk.decrypt(c).unwrap(), v);
    }
    for row in db.rows() {
        assert!(store.table().contains_key(&row.orders[0]));
    }
}

#[test]
fn cleanup_restores_the_table() {
    let setup = Setup::new(params(16, det(16, 32), IntegrityMode::Off), 512);
    let cluster = setup.start(&[5, 9, 1, 7], None);
    let snapshot = {
        let db = cluster.database();
        let db = db.read().unwrap();
        db.store("X1").unwrap().clone()
    };
    let mut da = cluster.connect_analyst(2).unwrap();
    let a = da.encrypt("X1", &big(6)).unwrap();
    let b = da.encrypt("X1", &big(8)).unwrap();
    assert_eq!(da.cleanup(&[a.session, b.session]).unwrap(), 2);
    assert_eq!(da.cleanup(&[a.session]).unwrap(), 0);
    let db = cluster.database();
    let db = db.read().unwrap();
    let now = db.store("X1").unwrap();
    assert_eq!(now.table(), snapshot.table());
    assert_eq!(now.tree().preorder(), snapshot.tree().preorder());
}

#[test]
fn identifier_uploads_are_probed_back() {
    let p = ProtocolParams::new(det(16, 32), 32, IntegrityMode::Off, true).unwrap();
    let setup = Setup::new(p, 512);
    let cluster = setup.start(&[100, 50, 150], None);
    let mut da = cluster.connect_analyst(4).unwrap();
    let a = da.encrypt("X1", &big(120)).unwrap();
    // 130 walks through the identifier node stored for 120
    let b = da.encrypt("X1", &big(130)).unwrap();
    assert!(b.order > a.order);
    let again = da.encrypt("X1", &big(120)).unwrap();
    assert_eq!(again.order, a.order);
    drop(da);
    let types = cluster.transcripts().csp_to_analyst.message_types();
    assert!(types.contains(&MessageType::UidProbe));
}

struct Substitute {
    from_round: u32,
}

impl NodeTamper for Substitute {
    fn substitute(
        &mut self,
        round: u32,
        entry: &OpeEntry,
        pk: &PublicKey,
        rng: &mut ChaCha20Rng,
    ) -> Option<(HomCiphertext, Option<HomCiphertext>)> {
        if round < self.from_round {
            return None;
        }
        let _ = entry;
        let fake = pk.encrypt(&BigUint::from(rng.gen_range(0u32..1 << 16)), None, rng).unwrap();
        let blinding = pk.encrypt(&BigUint::from(rng.gen::<u64>()), None, rng).unwrap();
        Some((fake, Some(blinding)))
    }
}

fn tamper_detected(integrity: IntegrityMode) {
    let setup = Setup::new(params(16, det(16, 32), integrity), 512);
    let cluster = setup.start(&[40, 20, 60, 10, 30], Some(Box::new(Substitute { from_round: 1 })));
    let mut da = cluster.connect_analyst(8).unwrap();
    let err = da.encrypt("X1", &big(25)).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err:?}");
    drop(da);
    let records = wait_records(&cluster, 1);
    assert_eq!(records[0].outcome, SessionOutcome::Aborted(AbortReason::IntegrityCheck));
    // the owner never garbled for the forged round
    let gcs = cluster
        .transcripts()
        .owner_to_analyst
        .message_types()
        .iter()
        .filter(|t| **t == MessageType::GcPayload)
        .count();
    assert_eq!(gcs, 1);
}

#[test]
fn substituted_nodes_fail_dl_mac() {
    tamper_detected(IntegrityMode::DlMac);
}

#[test]
fn substituted_nodes_fail_pedersen() {
    tamper_detected(IntegrityMode::Pedersen);
}

#[test]
fn honest_sessions_verify_and_recover_after_abort() {
    for integrity in [IntegrityMode::DlMac, IntegrityMode::Pedersen] {
        let setup = Setup::new(params(16, det(16, 32), integrity), 512);
        let cluster = setup.start(&[40, 20, 60, 10, 30], None);
        let mut da = cluster.connect_analyst(8).unwrap();
        let a = da.encrypt("X1", &big(25)).unwrap();
        // the upload carries a tag, so the new node verifies in later sessions
        let b = da.encrypt("X1", &big(26)).unwrap();
        assert!(a.order < b.order);
        // a value too wide for l is refused before any message
        assert!(matches!(da.encrypt("X1", &big(1 << 20)), Err(Error::Domain(_))));
        let c = da.encrypt("X1", &big(25)).unwrap();
        assert_eq!(c.order, a.order);
    }
}

struct Oversized;

impl NodeTamper for Oversized {
    fn substitute(
        &mut self,
        _: u32,
        _: &OpeEntry,
        pk: &PublicKey,
        rng: &mut ChaCha20Rng,
    ) -> Option<(HomCiphertext, Option<HomCiphertext>)> {
        Some((pk.encrypt(&(BigUint::from(1u8) << 200u32), None, rng).unwrap(), None))
    }
}

#[test]
fn owner_rejects_out_of_range_nodes() {
    let setup = Setup::new(params(16, det(16, 32), IntegrityMode::Off), 512);
    let cluster = setup.start(&[3, 1, 4], Some(Box::new(Oversized)));
    let mut da = cluster.connect_analyst(1).unwrap();
    let err = da.encrypt("X1", &big(2)).unwrap_err();
    assert!(matches!(err, Error::Aborted(AbortReason::MalformedNode)), "{err:?}");
    drop(da);
    assert_eq!(wait_records(&cluster, 1)[0].outcome, SessionOutcome::Aborted(AbortReason::MalformedNode));
}

struct Quota(u64);

impl SessionHook for Quota {
    fn admit(&mut self, _: &[u8; 32], count: u64) -> bool {
        count <= self.0
    }
}

#[test]
fn session_hook_refuses_over_quota() {
    let setup = Setup::new(params(16, det(16, 32), IntegrityMode::Off), 512);
    let ing = ingest_values(&[3, 1, 4], &setup.params, &setup.sk, None, TreeShape::Balanced, 1);
    let cluster = Cluster::start_with_hook(
        ClusterSpec::new(setup.params, TransportKind::Loopback),
        ing.database,
        ing.owner,
        setup.sk.clone(),
        None,
        None,
        Some(Box::new(Quota(2))),
    )
    .unwrap();
    let mut da = cluster.connect_analyst(1).unwrap();
    da.encrypt("X1", &big(2)).unwrap();
    da.encrypt("X1", &big(5)).unwrap();
    let err = da.encrypt("X1", &big(6)).unwrap_err();
    assert!(matches!(err, Error::Aborted(AbortReason::RateLimited)), "{err:?}");
    // an analyst over quota is refused queries as well
    let all = Condition {
        column: "X1".into(),
        op: CmpOp::Ge,
        value: big(0),
    };
    assert!(matches!(da.range_query(&[all], Projection::Count), Err(Error::Aborted(AbortReason::RateLimited))));
}

#[test]
fn mismatched_parameters_fail_the_handshake() {
    let setup = Setup::new(params(16, det(16, 32), IntegrityMode::Off), 512);
    let cluster = setup.start(&[3, 1, 4], None);
    let mut other = cluster.analyst_config(None, [0; 32], 1);
    other.params = params(20, det(20, 32), IntegrityMode::Off);
    assert!(matches!(cluster.connect(other), Err(Error::Handshake(_))));
    // the servers keep serving
    let mut da = cluster.connect_analyst(2).unwrap();
    assert_eq!(da.encrypt("X1", &big(3)).unwrap().order, {
        let db = cluster.database();
        let db = db.read().unwrap();
        db.rows()[0].orders[0]
    });
}

#[test]
fn transports_produce_identical_transcripts() {
    let run = |transport| {
        let mut setup = Setup::new(params(16, det(16, 32), IntegrityMode::DlMac), 512);
        setup.transport = transport;
        let values: Vec<u64> = (0..30).map(|i| (i * 7919) % 1000).collect();
        let cluster = setup.start(&values, None);
        let mut da = cluster.connect_analyst(21).unwrap();
        da.encrypt("X1", &big(333)).unwrap();
        da.encrypt("X1", &big(7)).unwrap();
        drop(da);
        let t = cluster.transcripts().clone();
        cluster.shutdown().unwrap();
        t.links().map(|(name, t)| (name, t.frames()))
    };
    let a = run(TransportKind::Loopback);
    let b = run(TransportKind::Tcp);
    for ((name, fa), (_, fb)) in a.iter().zip(&b) {
        assert!(!fa.is_empty(), "{name} carried nothing");
        assert_eq!(fa, fb, "{name} differs");
    }
}

fn fh_setup(log2m: u32) -> (Setup, oope::homcrypto::PrivateKey) {
    let table = TableParams::new(16, log2m, Mode::FrequencyHiding).unwrap();
    (Setup::new(params(16, table, IntegrityMode::Off), 512), key(576, 3))
}

#[test]
fn frequency_hiding_duplicates_get_fresh_orders() {
    let (setup, da_key) = fh_setup(48);
    let values = [10u64, 20, 20, 30, 40, 20, 50];
    let cluster = setup.start(&values, None);
    let mut da = cluster.connect(cluster.analyst_config(Some(da_key), [1; 32], 6)).unwrap();
    let mut orders = BTreeSet::new();
    for _ in 0..6 {
        let out = da.encrypt("X1", &big(20)).unwrap();
        assert!(orders.insert(out.order));
        let db = cluster.database();
        let db = db.read().unwrap();
        let plain = plaintexts(db.store("X1").unwrap(), &setup.sk);
        // all 20s form one contiguous block around the new order
        let below = plain.iter().filter(|(_, v)| *v < 20).count();
        let equal = plain.iter().filter(|(_, v)| *v == 20).count();
        let rank = plain.iter().position(|(o, _)| *o == out.order).unwrap();
        assert!(rank >= below && rank < below + equal);
        assert!(out.bounds.min <= out.order && out.order <= out.bounds.max);
    }
    drop(da);
    // the server saw directions only
    for r in cluster.records() {
        assert_eq!(r.rounds, r.height);
        assert!(r.bits.iter().all(|b| matches!(b, RoundBits::Direction(_))));
    }
}

#[test]
fn frequency_hiding_min_max_matches_oracle() {
    let (setup, da_key) = fh_setup(48);
    let values = [10u64, 20, 20, 30, 20, 5, 60];
    let cluster = setup.start(&values, None);
    let mut da = cluster.connect(cluster.analyst_config(Some(da_key), [1; 32], 6)).unwrap();
    for x in [20u64, 25, 5, 60, 70, 0] {
        let out = da.encrypt("X1", &big(x)).unwrap();
        let db = cluster.database();
        let db = db.read().unwrap();
        let plain = plaintexts(db.store("X1").unwrap(), &setup.sk);
        let same: Vec<u128> = plain.iter().filter(|(_, v)| *v == x).map(|(o, _)| *o).collect();
        assert_eq!(out.bounds.min, *same.iter().min().unwrap(), "x={x}");
        assert_eq!(out.bounds.max, *same.iter().max().unwrap(), "x={x}");
        drop(db);
        da.cleanup(&[out.session]).unwrap();
    }
}

#[test]
fn frequency_hiding_refuses_small_analyst_keys() {
    let (setup, _) = fh_setup(48);
    let cluster = setup.start(&[1, 2], None);
    let small = key(384, 9);
    assert!(matches!(
        cluster.connect(cluster.analyst_config(Some(small), [1; 32], 6)),
        Err(Error::Config(_))
    ));
}
