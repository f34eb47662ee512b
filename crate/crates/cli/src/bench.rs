//! Benchmark harness: table generation, full encryption sessions and the
//! cost of one comparison round, reported as CSV or JSON rows.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{self, Write};
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use oope::datastore::Database;
use oope::homcrypto::{keygen, keygen_for_testing, PrivateKey, PRODUCTION_KEY_BITS};
use oope::integrity::{IntegrityMode, MacParams};
use oope::ope::{
    init_state, write_synthetic_table, write_table, InitOptions, InitOutput, Mode, TableParams, TableSizeReport,
    TreeShape,
};
use oope::protocol::{Analyst, Cluster, ClusterSpec, Metrics, Phase, PhaseSample, ProtocolParams, TransportKind};
use oope::transport::SessionId;
use oope::{Error, Result};

/// Bits of head room between the largest table and the order space.
pub const ORDER_MARGIN_BITS: u32 = 8;
/// Frequency-hiding tables need `log2 M >= FH_ORDER_FACTOR * log2 n`.
pub const FH_ORDER_FACTOR: f64 = 6.4;
const COLUMN: &str = "X1";

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub db_sizes: Vec<usize>,
    /// Measured trials per size.
    pub trials: usize,
    /// Extra leading trials reported only in the `_with_warmup` columns.
    pub warmup: usize,
    pub l: u32,
    pub k: u32,
    pub log2m: u32,
    pub key_bits: usize,
    pub transport: TransportKind,
    pub mode: Mode,
    pub integrity: IntegrityMode,
    pub seed: u64,
    /// Larger tables are sized with the streaming writer instead of being
    /// generated.
    pub materialize_limit: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            db_sizes: vec![100, 1_000, 10_000, 100_000, 1_000_000],
            trials: 100,
            warmup: 3,
            l: 32,
            k: 32,
            log2m: 64,
            key_bits: 2048,
            transport: TransportKind::Loopback,
            mode: Mode::Deterministic,
            integrity: IntegrityMode::Off,
            seed: 1,
            materialize_limit: 100_000,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let Some(&largest) = self.db_sizes.iter().max() else {
            return Err(Error::Config("no database sizes given".into()));
        };
        let need = (largest as f64 + 1.0).log2().ceil() as u32 + ORDER_MARGIN_BITS;
        if self.log2m < need {
            return Err(Error::Config(format!(
                "log2 M = {} is too small for {largest} entries (need at least {need})",
                self.log2m
            )));
        }
        if self.mode == Mode::FrequencyHiding && largest > 1 {
            let need = FH_ORDER_FACTOR * (largest as f64).log2();
            if f64::from(self.log2m) < need {
                return Err(Error::Config(format!(
                    "frequency-hiding tables of {largest} entries need log2 M >= {need:.1}"
                )));
            }
        }
        if self.l < 64 && largest as u128 > 1u128 << self.l {
            return Err(Error::Config(format!("{largest} distinct values do not fit in {} bits", self.l)));
        }
        self.protocol_params().map(|_| ())
    }

    pub fn protocol_params(&self) -> Result<ProtocolParams> {
        ProtocolParams::new(TableParams::new(self.l, self.log2m, self.mode)?, self.k, self.integrity, false)
    }
}

/// Keys shared by every size of one benchmark run.
#[derive(Debug, Clone)]
pub struct BenchKeys {
    pub owner: PrivateKey,
    /// Frequency-hiding mode only; wider than the owner key.
    pub analyst: Option<PrivateKey>,
    pub mac: Option<MacParams>,
}

fn any_keygen(bits: usize, rng: &mut ChaCha20Rng) -> Result<PrivateKey> {
    let (_, sk) = if PRODUCTION_KEY_BITS.contains(&bits) {
        keygen(bits, rng)?
    } else {
        keygen_for_testing(bits, rng)?
    };
    Ok(sk)
}

impl BenchKeys {
    pub fn generate(cfg: &BenchConfig) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x6b65_7973);
        let owner = any_keygen(cfg.key_bits, &mut rng)?;
        let analyst = match cfg.mode {
            Mode::FrequencyHiding => Some(keygen_for_testing(cfg.key_bits + 64, &mut rng)?.1),
            Mode::Deterministic => None,
        };
        let mac = match cfg.integrity {
            IntegrityMode::Off => None,
            _ => Some(MacParams::generate_for_testing(512, &mut rng)?),
        };
        Ok(Self { owner, analyst, mac })
    }
}

/// A size left out of a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub db_size: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Report<R> {
    pub rows: Vec<R>,
    pub skipped: Vec<Skipped>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreegenRow {
    pub db_size: usize,
    /// Absent when the table was sized without being generated.
    pub gen_seconds: Option<f64>,
    pub payload_bytes: u64,
    pub framing_bytes: u64,
    pub total_bytes: u64,
    pub payload_mib: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncryptRow {
    pub db_size: usize,
    pub height: usize,
    pub trials: usize,
    pub rounds: f64,
    pub mean_ms: f64,
    pub mean_ms_with_warmup: f64,
    pub comparison_ms: f64,
    pub decrypt_ms: f64,
    pub gc_ms: f64,
    pub verify_ms: f64,
    pub net_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub db_size: usize,
    pub rounds: usize,
    pub mean_ms: f64,
    pub mean_ms_with_warmup: f64,
    pub decrypt_ms: f64,
    pub gc_ms: f64,
    pub net_ms: f64,
}

/// Per-round and per-session averages over a set of sessions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Breakdown {
    pub sessions: usize,
    pub rounds: usize,
    pub session_ms: f64,
    pub round_ms: f64,
    pub decrypt_ms: f64,
    pub gc_ms: f64,
    pub verify_ms: f64,
    /// Round time not spent in any measured computation.
    pub net_ms: f64,
}

impl Breakdown {
    pub fn rounds_per_session(&self) -> f64 {
        ratio(self.rounds as f64, self.sessions as f64)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Averages the samples of `sessions`. Phase times are summed over both
/// parties and divided by the number of server rounds.
pub fn summarize(samples: &[PhaseSample], sessions: &[SessionId]) -> Breakdown {
    let wanted: BTreeSet<SessionId> = sessions.iter().copied().collect();
    let mut totals: BTreeMap<Phase, Duration> = BTreeMap::new();
    let mut rounds = 0usize;
    let mut seen = BTreeSet::new();
    for s in samples.iter().filter(|s| wanted.contains(&s.session)) {
        *totals.entry(s.phase).or_default() += s.elapsed;
        match s.phase {
            Phase::Round => rounds += 1,
            Phase::Session => {
                seen.insert(s.session);
            }
            _ => {}
        }
    }
    let total = |p| ms(totals.get(&p).copied().unwrap_or_default());
    let per_round = |v: f64| ratio(v, rounds as f64);
    let round_ms = per_round(total(Phase::Round));
    let decrypt_ms = per_round(total(Phase::Decrypt));
    let gc_ms = per_round(total(Phase::Garble) + total(Phase::Evaluate));
    let verify_ms = per_round(total(Phase::Verify));
    Breakdown {
        sessions: seen.len(),
        rounds,
        session_ms: ratio(total(Phase::Session), seen.len() as f64),
        round_ms,
        decrypt_ms,
        gc_ms,
        verify_ms,
        net_ms: (round_ms - decrypt_ms - gc_ms - verify_ms).max(0.0),
    }
}

/// `n` distinct values below `2^l`.
pub fn distinct_values(n: usize, l: u32, rng: &mut ChaCha20Rng) -> Vec<BigUint> {
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: u128 = if l >= 128 { rng.gen() } else { rng.gen_range(0..1u128 << l) };
        if seen.insert(v) {
            out.push(BigUint::from(v));
        }
    }
    out
}

/// Balanced table over `n` distinct random values.
pub fn generate_state(cfg: &BenchConfig, keys: &BenchKeys, n: usize, seed: u64) -> Result<InitOutput> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let values = distinct_values(n, cfg.l, &mut rng);
    let opts = InitOptions {
        shape: TreeShape::Balanced,
        integrity: cfg.integrity,
        mac_params: keys.mac.as_ref(),
    };
    init_state(&values, &cfg.protocol_params()?.table, &keys.owner, &opts, &mut rng)
}

fn available_memory() -> Option<u64> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

/// Rough resident size of a generated table of `n` entries.
fn memory_estimate(cfg: &BenchConfig, n: usize) -> u64 {
    let cipher = (cfg.key_bits as u64 / 4) + 64;
    let per_entry = match cfg.mode {
        Mode::Deterministic => cipher,
        Mode::FrequencyHiding => 3 * cipher,
    } + if cfg.integrity == IntegrityMode::Off { 0 } else { cipher + 128 }
        + 256;
    per_entry * n as u64
}

fn memory_check(cfg: &BenchConfig, n: usize) -> Option<Skipped> {
    let need = memory_estimate(cfg, n);
    let have = available_memory()?;
    (need > have).then(|| {
        let reason = format!("needs about {} MiB, {} MiB available", need >> 20, have >> 20);
        log::warn!("skipping db size {n}: {reason}");
        Skipped { db_size: n, reason }
    })
}

pub fn bench_treegen(cfg: &BenchConfig, keys: &BenchKeys) -> Result<Report<TreegenRow>> {
    cfg.validate()?;
    let mut report = Report {
        rows: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, &n) in cfg.db_sizes.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(i as u64);
        let (gen_seconds, sizes) = if n <= cfg.materialize_limit {
            if let Some(s) = memory_check(cfg, n) {
                report.skipped.push(s);
                continue;
            }
            let start = Instant::now();
            let out = generate_state(cfg, keys, n, seed)?;
            let secs = start.elapsed().as_secs_f64();
            (Some(secs), write_table(&out.store, io::sink())?)
        } else {
            (None, synthetic_size(cfg, keys, n, seed)?)
        };
        report.rows.push(TreegenRow {
            db_size: n,
            gen_seconds,
            payload_bytes: sizes.payload_bytes,
            framing_bytes: sizes.framing_bytes(),
            total_bytes: sizes.total_bytes,
            payload_mib: sizes.payload_bytes as f64 / f64::from(1u32 << 20),
        });
    }
    Ok(report)
}

/// Byte accounting of an `n`-entry table built from one real entry.
pub fn synthetic_size(cfg: &BenchConfig, keys: &BenchKeys, n: usize, seed: u64) -> Result<TableSizeReport> {
    let one = generate_state(cfg, keys, 1, seed)?;
    let template = one
        .store
        .table()
        .values()
        .next()
        .ok_or_else(|| Error::Protocol("template table is empty".into()))?;
    write_synthetic_table(one.store.params(), one.store.layout(), template, n as u64, io::sink())
}

/// Timings of one size: every session in trial order.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub db_size: usize,
    pub height: usize,
    pub sessions: Vec<SessionId>,
    pub warmup: usize,
    pub samples: Vec<PhaseSample>,
}

impl Measurement {
    pub fn measured(&self) -> Breakdown {
        summarize(&self.samples, &self.sessions[self.warmup.min(self.sessions.len())..])
    }

    pub fn with_warmup(&self) -> Breakdown {
        summarize(&self.samples, &self.sessions)
    }
}

/// A running cluster over one generated table, with a connected analyst.
/// Trials can be run in slices so that several sizes can be interleaved.
pub struct Rig {
    cluster: Cluster,
    da: Analyst,
    metrics: Metrics,
    rng: ChaCha20Rng,
    l: u32,
    db_size: usize,
    height: usize,
    warmup: usize,
    sessions: Vec<SessionId>,
}

impl Rig {
    /// Generates the table and prepares randomness for `warmup + trials`
    /// sessions.
    pub fn start(cfg: &BenchConfig, keys: &BenchKeys, n: usize, seed: u64) -> Result<Self> {
        let params = cfg.protocol_params()?;
        let out = generate_state(cfg, keys, n, seed)?;
        let height = out.store.height();
        let db = Database::empty(Vec::new(), vec![(COLUMN.to_string(), out.store)])?;
        let metrics = Metrics::default();
        let total = cfg.warmup + cfg.trials;
        let mut spec = ClusterSpec::new(params, cfg.transport);
        spec.csp_seed = seed ^ 0x11;
        spec.owner_seed = seed ^ 0x22;
        spec.csp_pool_prefill = (total * (height + 2)).min(4096);
        spec.metrics = Some(metrics.clone());
        let owner = BTreeMap::from([(COLUMN.to_string(), out.owner)]);
        let cluster = Cluster::start(spec, db, owner, keys.owner.clone(), keys.mac.clone(), None)?;
        let connected = cluster
            .connect(cluster.analyst_config(keys.analyst.clone(), [7; 32], seed ^ 0x33))
            .and_then(|mut da| da.prefill_pool(2 * total).map(|_| da));
        let da = match connected {
            Ok(da) => da,
            Err(e) => {
                let _ = cluster.shutdown();
                return Err(e);
            }
        };
        Ok(Rig {
            cluster,
            da,
            metrics,
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x44),
            l: cfg.l,
            db_size: n,
            height,
            warmup: cfg.warmup,
            sessions: Vec::with_capacity(total),
        })
    }

    /// Encrypts `count` fresh random values, undoing each insert so every
    /// trial sees the same tree. The first `warmup` sessions overall are
    /// excluded from the measured figures.
    pub fn run(&mut self, count: usize) -> Result<()> {
        for _ in 0..count {
            let x = distinct_values(1, self.l, &mut self.rng).remove(0);
            let o = self.da.encrypt(COLUMN, &x)?;
            self.da.cleanup(&[o.session])?;
            self.sessions.push(o.session);
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Measurement> {
        drop(self.da);
        self.cluster.shutdown()?;
        Ok(Measurement {
            db_size: self.db_size,
            height: self.height,
            sessions: self.sessions,
            warmup: self.warmup,
            samples: self.metrics.samples(),
        })
    }
}

/// Runs `warmup + trials` encryptions against a generated table of `n`
/// entries.
pub fn measure(cfg: &BenchConfig, keys: &BenchKeys, n: usize, seed: u64) -> Result<Measurement> {
    let mut rig = Rig::start(cfg, keys, n, seed)?;
    let ran = rig.run(cfg.warmup + cfg.trials);
    let m = rig.finish();
    ran?;
    m
}

fn measure_all(cfg: &BenchConfig, keys: &BenchKeys) -> Result<Report<Measurement>> {
    cfg.validate()?;
    let mut report = Report {
        rows: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, &n) in cfg.db_sizes.iter().enumerate() {
        if let Some(s) = memory_check(cfg, n) {
            report.skipped.push(s);
            continue;
        }
        report.rows.push(measure(cfg, keys, n, cfg.seed.wrapping_add(i as u64))?);
    }
    Ok(report)
}

pub fn encrypt_row(m: &Measurement) -> EncryptRow {
    let b = m.measured();
    EncryptRow {
        db_size: m.db_size,
        height: m.height,
        trials: b.sessions,
        rounds: b.rounds_per_session(),
        mean_ms: b.session_ms,
        mean_ms_with_warmup: m.with_warmup().session_ms,
        comparison_ms: b.round_ms,
        decrypt_ms: b.decrypt_ms,
        gc_ms: b.gc_ms,
        verify_ms: b.verify_ms,
        net_ms: b.net_ms,
    }
}

pub fn compare_row(m: &Measurement) -> CompareRow {
    let b = m.measured();
    CompareRow {
        db_size: m.db_size,
        rounds: b.rounds,
        mean_ms: b.round_ms,
        mean_ms_with_warmup: m.with_warmup().round_ms,
        decrypt_ms: b.decrypt_ms,
        gc_ms: b.gc_ms,
        net_ms: b.net_ms,
    }
}

pub fn bench_encrypt(cfg: &BenchConfig, keys: &BenchKeys) -> Result<Report<EncryptRow>> {
    let r = measure_all(cfg, keys)?;
    Ok(Report {
        rows: r.rows.iter().map(encrypt_row).collect(),
        skipped: r.skipped,
    })
}

pub fn bench_compare(cfg: &BenchConfig, keys: &BenchKeys) -> Result<Report<CompareRow>> {
    let r = measure_all(cfg, keys)?;
    Ok(Report {
        rows: r.rows.iter().map(compare_row).collect(),
        skipped: r.skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

pub fn write_rows<R: Serialize, W: Write>(rows: &[R], format: OutputFormat, mut w: W) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut out = csv::Writer::from_writer(w);
            for r in rows {
                out.serialize(r)?;
            }
            out.flush()?;
        }
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut w, rows)?;
            writeln!(w)?;
        }
    }
    Ok(())
}
