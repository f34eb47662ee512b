//! Command-line front end. Flags may be overridden by `OOPE_*` variables.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::bench::{self, BenchConfig, BenchKeys, OutputFormat};
use oope::datastore::{ingest, Condition, Database, Projection};
use oope::homcrypto::{keygen, keygen_for_testing, PrivateKey, PublicKey, PRODUCTION_KEY_BITS};
use oope::integrity::{IntegrityMode, MacParams};
use oope::ope::{InitOptions, Mode, OwnerState, TableParams, TreeShape};
use oope::protocol::{Analyst, AnalystConfig, CspServer, OwnerDaemon, ProtocolParams, TransportKind};
use oope::transport::{handshake, tcp, Endpoint, Role, SessionId};
use oope::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_GENERIC: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_HANDSHAKE: i32 = 3;
pub const EXIT_ABORT: i32 = 4;
pub const EXIT_CONNECT: i32 = 5;
pub const EXIT_CORRUPT: i32 = 6;

const OWNER_KEY: &str = "owner.key";
const OWNER_PUB: &str = "owner.pub";
const ANALYST_KEY: &str = "analyst.key";
const MAC_FILE: &str = "mac.json";
const DB_FILE: &str = "db.bin";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &Error) -> i32 {
    use io::ErrorKind as K;
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Domain(_) => EXIT_USAGE,
        Error::Handshake(_) => EXIT_HANDSHAKE,
        Error::Aborted(_)
        | Error::Integrity(_)
        | Error::ShareMismatch { .. }
        | Error::MalformedNode(_)
        | Error::MinMaxInconsistent(_)
        | Error::RateLimited
        | Error::Capacity { .. } => EXIT_ABORT,
        Error::ChannelClosed => EXIT_CONNECT,
        Error::Io(io) if matches!(
            io.kind(),
            K::ConnectionRefused | K::ConnectionReset | K::ConnectionAborted | K::TimedOut | K::BrokenPipe | K::AddrInUse
        ) =>
        {
            EXIT_CONNECT
        }
        Error::Corrupt(_) | Error::Json(_) => EXIT_CORRUPT,
        _ => EXIT_GENERIC,
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Det,
    Fh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IntegrityArg {
    Off,
    Dlmac,
    Pedersen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutArg {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportArg {
    Loopback,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShapeArg {
    Insertion,
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Csp,
    Do,
    Da,
}

/// Options shared by every command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Directory holding keys, tables and owner maps.
    #[arg(long, global = true, default_value = "oope-state")]
    pub state: PathBuf,
    /// Plaintext bits.
    #[arg(long, global = true, default_value_t = 32)]
    pub l: u32,
    /// Statistical blinding bits.
    #[arg(long, global = true, default_value_t = 32)]
    pub k: u32,
    /// Order space is [0, 2^log2m].
    #[arg(long, global = true, default_value_t = 64)]
    pub log2m: u32,
    /// Exact order space bound; takes precedence over --log2m.
    #[arg(long, global = true)]
    pub max_order: Option<u128>,
    #[arg(long, global = true, default_value_t = 2048)]
    pub key_bits: usize,
    #[arg(long, global = true, value_enum, default_value = "det")]
    pub mode: ModeArg,
    #[arg(long, global = true, value_enum, default_value = "off")]
    pub integrity: IntegrityArg,
    /// Analysts store opaque identifiers instead of ciphertexts.
    #[arg(long, global = true)]
    pub uid: bool,
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    pub out: OutArg,
    /// Address this daemon accepts analysts on.
    #[arg(long, global = true)]
    pub listen: Option<String>,
    /// Storage server address.
    #[arg(long, global = true)]
    pub peer: Option<String>,
    /// Address the storage server accepts the data owner on.
    #[arg(long, global = true)]
    pub owner_listen: Option<String>,
    /// Data owner address, for analysts.
    #[arg(long, global = true)]
    pub owner_peer: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub role: Option<RoleArg>,
    /// How long to keep retrying a peer that is not up yet.
    #[arg(long, global = true, default_value_t = 10_000)]
    pub connect_timeout_ms: u64,
}

#[derive(Debug, Parser)]
#[command(name = "oope", version, about = "Oblivious order-preserving encryption", args_override_self = true)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generates the owner key pair (and integrity group) or an analyst key.
    Keygen {
        /// Integrity group size; defaults to 2048 bits when integrity is on.
        #[arg(long)]
        mac_bits: Option<usize>,
    },
    /// Encrypts a CSV file into a server table and owner maps.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        /// Columns to encode, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
        #[arg(long, value_enum, default_value = "balanced")]
        shape: ShapeArg,
    },
    /// Runs the storage server or data owner daemon.
    Serve {
        #[arg(value_enum)]
        which: Option<RoleArg>,
        /// Exit after this many analyst connections.
        #[arg(long)]
        max_analysts: Option<usize>,
    },
    /// Data analyst commands.
    Da {
        #[command(subcommand)]
        command: DaCommand,
    },
    /// Removes the entries inserted by the given sessions.
    Cleanup {
        /// Session ids (hex), comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        sessions: Vec<String>,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum DaCommand {
    /// Obtains the order of a value.
    Encrypt {
        #[arg(long, default_value = "X1")]
        column: String,
        #[arg(long)]
        value: String,
    },
    /// Runs a range query such as `X1<32`.
    Query {
        #[arg(long = "where", required = true)]
        conditions: Vec<String>,
        /// `count` or comma-separated column names.
        #[arg(long, default_value = "count")]
        select: String,
    },
    /// Order range of a value in frequency-hiding mode.
    Minmax {
        #[arg(long, default_value = "X1")]
        column: String,
        #[arg(long)]
        value: String,
    },
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "100,1000,10000,100000,1000000")]
    pub db_sizes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, value_enum, default_value = "loopback")]
    pub transport: TransportArg,
    /// Sizes above this are measured with the streaming table writer.
    #[arg(long, default_value_t = 100_000)]
    pub materialize_limit: usize,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    Treegen(BenchArgs),
    Encrypt(BenchArgs),
    Compare(BenchArgs),
}

fn env_value<T: std::str::FromStr>(env: &dyn Fn(&str) -> Option<String>, name: &str) -> CliResult<Option<T>> {
    env(name)
        .map(|v| {
            v.parse()
                .map_err(|_| CliError::Usage(format!("invalid value {v:?} in {name}")))
        })
        .transpose()
}

fn env_enum<T: ValueEnum>(env: &dyn Fn(&str) -> Option<String>, name: &str) -> CliResult<Option<T>> {
    env(name)
        .map(|v| T::from_str(&v, true).map_err(|_| CliError::Usage(format!("invalid value {v:?} in {name}"))))
        .transpose()
}

impl Common {
    /// Replaces flag values with any `OOPE_*` variables that are set.
    pub fn apply_env(&mut self, env: &dyn Fn(&str) -> Option<String>) -> CliResult {
        if let Some(v) = env("OOPE_STATE") {
            self.state = v.into();
        }
        macro_rules! parsed {
            ($($field:ident => $name:literal),* $(,)?) => {
                $(if let Some(v) = env_value(env, $name)? { self.$field = v; })*
            };
        }
        parsed!(l => "OOPE_L", k => "OOPE_K", log2m => "OOPE_LOG2M", key_bits => "OOPE_KEY_BITS", seed => "OOPE_SEED", uid => "OOPE_UID",
            connect_timeout_ms => "OOPE_CONNECT_TIMEOUT_MS");
        if let Some(v) = env_value(env, "OOPE_MAX_ORDER")? {
            self.max_order = Some(v);
        }
        macro_rules! enums {
            ($($field:ident => $name:literal),* $(,)?) => {
                $(if let Some(v) = env_enum(env, $name)? { self.$field = v; })*
            };
        }
        enums!(mode => "OOPE_MODE", integrity => "OOPE_INTEGRITY", out => "OOPE_OUT");
        if let Some(v) = env_enum(env, "OOPE_ROLE")? {
            self.role = Some(v);
        }
        for (field, name) in [
            (&mut self.listen, "OOPE_LISTEN"),
            (&mut self.peer, "OOPE_PEER"),
            (&mut self.owner_listen, "OOPE_OWNER_LISTEN"),
            (&mut self.owner_peer, "OOPE_OWNER_PEER"),
        ] {
            if let Some(v) = env(name) {
                *field = Some(v);
            }
        }
        Ok(())
    }

    fn mode(&self) -> Mode {
        match self.mode {
            ModeArg::Det => Mode::Deterministic,
            ModeArg::Fh => Mode::FrequencyHiding,
        }
    }

    fn integrity(&self) -> IntegrityMode {
        match self.integrity {
            IntegrityArg::Off => IntegrityMode::Off,
            IntegrityArg::Dlmac => IntegrityMode::DlMac,
            IntegrityArg::Pedersen => IntegrityMode::Pedersen,
        }
    }

    fn format(&self) -> OutputFormat {
        match self.out {
            OutArg::Csv => OutputFormat::Csv,
            OutArg::Json => OutputFormat::Json,
        }
    }

    pub fn table_params(&self) -> CliResult<TableParams> {
        Ok(match self.max_order {
            Some(m) => TableParams::with_max_order(self.l, m, self.mode())?,
            None => TableParams::new(self.l, self.log2m, self.mode())?,
        })
    }

    pub fn protocol_params(&self) -> CliResult<ProtocolParams> {
        Ok(ProtocolParams::new(self.table_params()?, self.k, self.integrity(), self.uid)?)
    }

    fn connect_timeout(&self) -> Duration {
        Duration::from_millis(self.connect_timeout_ms)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.state.join(name)
    }

    fn require(&self, value: &Option<String>, flag: &str) -> CliResult<String> {
        value.clone().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
    }
}

/// Parses `args`, applies environment overrides and runs. Returns the exit code.
pub fn run_with<I, T>(args: I, env: &dyn Fn(&str) -> Option<String>, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let mut cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = cli.common.apply_env(env).and_then(|_| run(&cli.common, &cli.command, out));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("oope: {e}");
            e.exit_code()
        }
    }
}

pub fn run(c: &Common, command: &Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Keygen { mac_bits } => cmd_keygen(c, *mac_bits, out),
        Command::Ingest { csv, columns, shape } => cmd_ingest(c, csv, columns, *shape, out),
        Command::Serve { which, max_analysts } => {
            let role = which
                .or(c.role)
                .ok_or_else(|| CliError::Usage("serve needs a role: csp or do".into()))?;
            match role {
                RoleArg::Csp => serve_csp(c, *max_analysts, out),
                RoleArg::Do => serve_do(c, *max_analysts, out),
                RoleArg::Da => Err(CliError::Usage("analysts do not serve; use `da`".into())),
            }
        }
        Command::Da { command } => cmd_da(c, command, out),
        Command::Cleanup { sessions } => {
            let ids = sessions
                .iter()
                .map(|s| SessionId::from_hex(s))
                .collect::<oope::Result<Vec<_>>>()?;
            let removed = connect_analyst(c)?.cleanup(&ids)?;
            writeln!(out, "removed {removed}")?;
            Ok(())
        }
        Command::Bench { command } => cmd_bench(c, command, out),
    }
}

fn any_keygen(bits: usize, rng: &mut ChaCha20Rng) -> CliResult<PrivateKey> {
    if PRODUCTION_KEY_BITS.contains(&bits) {
        Ok(keygen(bits, rng)?.1)
    } else {
        log::warn!("{bits}-bit key is for testing only");
        Ok(keygen_for_testing(bits, rng)?.1)
    }
}

fn write_file(path: &Path, data: &str) -> CliResult {
    fs::write(path, data)?;
    Ok(())
}

fn cmd_keygen(c: &Common, mac_bits: Option<usize>, out: &mut dyn Write) -> CliResult {
    fs::create_dir_all(&c.state)?;
    let mut rng = ChaCha20Rng::from_entropy();
    match c.role.unwrap_or(RoleArg::Do) {
        RoleArg::Da => {
            let sk = any_keygen(c.key_bits, &mut rng)?;
            write_file(&c.path(ANALYST_KEY), &sk.to_json()?)?;
            writeln!(out, "wrote {}", c.path(ANALYST_KEY).display())?;
        }
        RoleArg::Do => {
            let sk = any_keygen(c.key_bits, &mut rng)?;
            write_file(&c.path(OWNER_KEY), &sk.to_json()?)?;
            write_file(&c.path(OWNER_PUB), &sk.public_key().to_json()?)?;
            writeln!(out, "wrote {}", c.path(OWNER_KEY).display())?;
            if c.integrity() != IntegrityMode::Off || mac_bits.is_some() {
                let bits = mac_bits.unwrap_or(2048);
                let mac = if bits >= 2048 {
                    MacParams::generate(bits, &mut rng)?
                } else {
                    log::warn!("{bits}-bit integrity group is for testing only");
                    MacParams::generate_for_testing(bits, &mut rng)?
                };
                write_file(&c.path(MAC_FILE), &mac.to_json()?)?;
                writeln!(out, "wrote {}", c.path(MAC_FILE).display())?;
            }
        }
        RoleArg::Csp => return Err(CliError::Usage("the storage server has no keys".into())),
    }
    Ok(())
}

fn read_string(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn load_private(path: &Path) -> CliResult<PrivateKey> {
    Ok(PrivateKey::from_json(&read_string(path)?)?)
}

fn load_public(c: &Common) -> CliResult<PublicKey> {
    Ok(PublicKey::from_json(&read_string(&c.path(OWNER_PUB))?)?)
}

fn load_mac(c: &Common) -> CliResult<Option<MacParams>> {
    if c.integrity() == IntegrityMode::Off {
        return Ok(None);
    }
    Ok(Some(MacParams::from_json(&read_string(&c.path(MAC_FILE))?)?))
}

fn owner_file(column: &str) -> String {
    format!("owner-{column}.json")
}

fn cmd_ingest(c: &Common, csv: &Path, columns: &[String], shape: ShapeArg, out: &mut dyn Write) -> CliResult {
    let params = c.protocol_params()?;
    let sk = load_private(&c.path(OWNER_KEY))?;
    let mac = load_mac(c)?;
    let opts = InitOptions {
        shape: match shape {
            ShapeArg::Insertion => TreeShape::Insertion,
            ShapeArg::Balanced => TreeShape::Balanced,
        },
        integrity: params.integrity,
        mac_params: mac.as_ref(),
    };
    let file = File::open(csv).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", csv.display())))?;
    let mut rng = ChaCha20Rng::seed_from_u64(c.seed);
    let ing = ingest(BufReader::new(file), columns, &params.table, &sk, &opts, &mut rng)?;
    save_db(c, &ing.database)?;
    for (column, state) in &ing.owner {
        let mut w = BufWriter::new(File::create(c.path(&owner_file(column)))?);
        state.write_json(&mut w)?;
        w.flush()?;
    }
    writeln!(out, "rows {}", ing.database.rows().len())?;
    for column in columns {
        let store = ing.database.store(column)?;
        writeln!(out, "column {column} entries {} height {}", store.len(), store.height())?;
    }
    Ok(())
}

fn save_db(c: &Common, db: &Database) -> CliResult {
    // write then rename so a crash never leaves a torn table
    let tmp = c.path(&format!("{DB_FILE}.tmp"));
    let mut w = BufWriter::new(File::create(&tmp)?);
    db.write_to(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(tmp, c.path(DB_FILE))?;
    Ok(())
}

fn load_db(c: &Common) -> CliResult<Database> {
    let path = c.path(DB_FILE);
    let file = File::open(&path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    Ok(Database::read_from(BufReader::new(file))?)
}

fn announce(out: &mut dyn Write, what: &str, listener: &tcp::Listener) -> CliResult {
    writeln!(out, "{what} {}", listener.local_addr()?)?;
    out.flush()?;
    Ok(())
}

fn serve_csp(c: &Common, max_analysts: Option<usize>, out: &mut dyn Write) -> CliResult {
    let params = c.protocol_params()?;
    let pk = load_public(c)?;
    let db = load_db(c)?;
    let analysts = tcp::Listener::bind(&c.require(&c.listen, "listen")?, Role::Csp)?;
    let owners = tcp::Listener::bind(&c.require(&c.owner_listen, "owner-listen")?, Role::Csp)?;
    announce(out, "owner-listen", &owners)?;
    announce(out, "listen", &analysts)?;

    let digest = params.digest();
    let mut owner = owners.accept()?;
    handshake(&mut owner, &digest, &[Role::Owner])?;
    let db = Arc::new(RwLock::new(db));
    let mut server = CspServer::new(params, pk, Arc::clone(&db), owner, c.seed)?;
    let mut served = 0usize;
    while max_analysts.is_none_or(|m| served < m) {
        let mut ep = analysts.accept()?;
        served += 1;
        match handshake(&mut ep, &digest, &[Role::Analyst]) {
            Ok(_) => {
                if let Err(e) = server.serve_analyst(&mut ep) {
                    log::warn!("analyst link ended: {e}");
                }
                let db = db.read().unwrap_or_else(|e| e.into_inner());
                save_db(c, &db)?;
            }
            Err(e) => log::warn!("rejected analyst connection: {e}"),
        }
    }
    Ok(())
}

fn load_owner_states(c: &Common) -> CliResult<BTreeMap<String, OwnerState>> {
    let mut states = BTreeMap::new();
    for entry in fs::read_dir(&c.state)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Some(column) = name.strip_prefix("owner-").and_then(|n| n.strip_suffix(".json")) else {
            continue;
        };
        let state = OwnerState::read_json(BufReader::new(File::open(&path)?))?;
        states.insert(column.to_string(), state);
    }
    Ok(states)
}

fn save_owner_states(c: &Common, states: &BTreeMap<String, OwnerState>) -> CliResult {
    for (column, state) in states {
        let tmp = c.path(&format!("{}.tmp", owner_file(column)));
        let mut w = BufWriter::new(File::create(&tmp)?);
        state.write_json(&mut w)?;
        w.flush()?;
        drop(w);
        fs::rename(tmp, c.path(&owner_file(column)))?;
    }
    Ok(())
}

fn serve_do(c: &Common, max_analysts: Option<usize>, out: &mut dyn Write) -> CliResult {
    let params = c.protocol_params()?;
    let sk = load_private(&c.path(OWNER_KEY))?;
    let mac = load_mac(c)?;
    let states = Arc::new(Mutex::new(load_owner_states(c)?));
    let analysts = tcp::Listener::bind(&c.require(&c.listen, "listen")?, Role::Owner)?;
    let digest = params.digest();
    let mut csp = tcp::connect(&c.require(&c.peer, "peer")?, Role::Owner, c.connect_timeout())?;
    handshake(&mut csp, &digest, &[Role::Csp])?;
    announce(out, "listen", &analysts)?;

    let mut daemon = OwnerDaemon::new(params, sk, mac, Arc::clone(&states), c.seed)?;
    let mut served = 0usize;
    while max_analysts.is_none_or(|m| served < m) {
        let mut ep = analysts.accept()?;
        served += 1;
        match handshake(&mut ep, &digest, &[Role::Analyst]) {
            Ok(_) => {
                if let Err(e) = daemon.serve_analyst(&mut csp, &mut ep) {
                    log::warn!("analyst link ended: {e}");
                }
                let states = states.lock().unwrap_or_else(|e| e.into_inner());
                save_owner_states(c, &states)?;
            }
            Err(e) => log::warn!("rejected analyst connection: {e}"),
        }
    }
    Ok(())
}

fn connect_analyst(c: &Common) -> CliResult<Analyst> {
    let params = c.protocol_params()?;
    let key = match params.mode() {
        Mode::FrequencyHiding => Some(load_private(&c.path(ANALYST_KEY))?),
        Mode::Deterministic => None,
    };
    let config = AnalystConfig {
        params,
        owner_key: load_public(c)?,
        mac: load_mac(c)?,
        key,
        id: [0; 32],
        seed: c.seed,
    };
    let csp: Endpoint = tcp::connect(&c.require(&c.peer, "peer")?, Role::Analyst, c.connect_timeout())?;
    let owner = tcp::connect(&c.require(&c.owner_peer, "owner-peer")?, Role::Analyst, c.connect_timeout())?;
    Ok(Analyst::connect(config, csp, owner)?)
}

fn parse_value(v: &str) -> CliResult<BigUint> {
    BigUint::parse_bytes(v.trim().as_bytes(), 10).ok_or_else(|| CliError::Usage(format!("not a non-negative integer: {v:?}")))
}

fn cmd_da(c: &Common, command: &DaCommand, out: &mut dyn Write) -> CliResult {
    match command {
        DaCommand::Encrypt { column, value } => {
            let x = parse_value(value)?;
            let o = connect_analyst(c)?.encrypt(column, &x)?;
            match c.out {
                OutArg::Csv => {
                    writeln!(out, "order {}", o.order)?;
                    writeln!(out, "session {}", o.session.to_hex())?;
                    writeln!(out, "rounds {}", o.rounds)?;
                    if o.rebalanced {
                        writeln!(out, "rebalanced")?;
                    }
                }
                OutArg::Json => writeln!(
                    out,
                    "{}",
                    serde_json::json!({
                        "order": o.order.to_string(),
                        "session": o.session.to_hex(),
                        "rounds": o.rounds,
                        "rebalanced": o.rebalanced,
                    })
                )?,
            }
        }
        DaCommand::Query { conditions, select } => {
            let conds = conditions
                .iter()
                .map(|s| s.parse::<Condition>())
                .collect::<oope::Result<Vec<_>>>()?;
            let projection = if select.trim() == "count" {
                Projection::Count
            } else {
                Projection::Columns(select.split(',').map(|s| s.trim().to_string()).collect())
            };
            let result = connect_analyst(c)?.range_query(&conds, projection)?;
            match c.out {
                OutArg::Csv => result.write_csv(&mut *out)?,
                OutArg::Json => result.write_json_lines(&mut *out)?,
            }
        }
        DaCommand::Minmax { column, value } => {
            if c.mode() != Mode::FrequencyHiding {
                return Err(CliError::Usage("minmax needs --mode fh".into()));
            }
            let x = parse_value(value)?;
            let o = connect_analyst(c)?.encrypt(column, &x)?;
            match c.out {
                OutArg::Csv => {
                    writeln!(out, "min {}", o.bounds.min)?;
                    writeln!(out, "max {}", o.bounds.max)?;
                    writeln!(out, "order {}", o.order)?;
                    writeln!(out, "session {}", o.session.to_hex())?;
                }
                OutArg::Json => writeln!(
                    out,
                    "{}",
                    serde_json::json!({
                        "min": o.bounds.min.to_string(),
                        "max": o.bounds.max.to_string(),
                        "order": o.order.to_string(),
                        "session": o.session.to_hex(),
                    })
                )?,
            }
        }
    }
    Ok(())
}

fn bench_config(c: &Common, a: &BenchArgs) -> BenchConfig {
    BenchConfig {
        db_sizes: a.db_sizes.clone(),
        trials: a.trials,
        warmup: a.warmup,
        l: c.l,
        k: c.k,
        log2m: c.log2m,
        key_bits: c.key_bits,
        transport: match a.transport {
            TransportArg::Loopback => TransportKind::Loopback,
            TransportArg::Tcp => TransportKind::Tcp,
        },
        mode: c.mode(),
        integrity: c.integrity(),
        seed: c.seed,
        materialize_limit: a.materialize_limit,
    }
}

fn cmd_bench(c: &Common, command: &BenchCommand, out: &mut dyn Write) -> CliResult {
    let (BenchCommand::Treegen(a) | BenchCommand::Encrypt(a) | BenchCommand::Compare(a)) = command;
    let cfg = bench_config(c, a);
    cfg.validate()?;
    let keys = BenchKeys::generate(&cfg)?;
    let skipped = match command {
        BenchCommand::Treegen(_) => {
            let r = bench::bench_treegen(&cfg, &keys)?;
            bench::write_rows(&r.rows, c.format(), &mut *out)?;
            r.skipped
        }
        BenchCommand::Encrypt(_) => {
            let r = bench::bench_encrypt(&cfg, &keys)?;
            bench::write_rows(&r.rows, c.format(), &mut *out)?;
            r.skipped
        }
        BenchCommand::Compare(_) => {
            let r = bench::bench_compare(&cfg, &keys)?;
            bench::write_rows(&r.rows, c.format(), &mut *out)?;
            r.skipped
        }
    };
    for s in skipped {
        eprintln!("skipped db size {}: {}", s.db_size, s.reason);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("oope").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn environment_overrides_flags() {
        let mut cli = parse(&["--l", "16", "--mode", "det", "da", "encrypt", "--value", "3"]);
        let env = |name: &str| match name {
            "OOPE_L" => Some("20".to_string()),
            "OOPE_MODE" => Some("fh".to_string()),
            "OOPE_PEER" => Some("127.0.0.1:9".to_string()),
            _ => None,
        };
        cli.common.apply_env(&env).unwrap();
        assert_eq!(cli.common.l, 20);
        assert_eq!(cli.common.mode, ModeArg::Fh);
        assert_eq!(cli.common.peer.as_deref(), Some("127.0.0.1:9"));
        assert_eq!(cli.common.k, 32);
    }

    #[test]
    fn bad_environment_value_is_a_usage_error() {
        let mut cli = parse(&["keygen"]);
        let err = cli.common.apply_env(&|n: &str| (n == "OOPE_K").then(|| "many".to_string())).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn global_flags_follow_subcommands() {
        let cli = parse(&["serve", "csp", "--listen", "127.0.0.1:0", "--l", "16"]);
        assert_eq!(cli.common.l, 16);
        assert!(matches!(cli.command, Command::Serve { which: Some(RoleArg::Csp), .. }));
    }

    #[test]
    fn exit_codes_by_error_kind() {
        let code = |e: Error| CliError::Core(e).exit_code();
        assert_eq!(code(Error::Handshake("x".into())), EXIT_HANDSHAKE);
        assert_eq!(code(Error::Aborted(oope::AbortReason::IntegrityCheck)), EXIT_ABORT);
        assert_eq!(code(Error::Corrupt("x".into())), EXIT_CORRUPT);
        assert_eq!(code(Error::ChannelClosed), EXIT_CONNECT);
        assert_eq!(
            code(Error::Io(io::Error::new(io::ErrorKind::TimedOut, "x"))),
            EXIT_CONNECT
        );
        assert_eq!(code(Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(code(Error::DecodeFailed), EXIT_GENERIC);
    }

    #[test]
    fn max_order_takes_precedence() {
        let cli = parse(&["--l", "16", "--max-order", "28", "keygen"]);
        assert_eq!(cli.common.table_params().unwrap().max_order, 28);
    }
}
