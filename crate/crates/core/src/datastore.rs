//! Server-side row store over order-encoded columns, owner-side CSV
//! ingestion, and range queries evaluated on orders alone.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Read, Write};
use std::ops::Bound;

use num_bigint::BigUint;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::homcrypto::PrivateKey;
use crate::ope::{
    init_state, read_table, write_table, InitOptions, InsertionPlan, OpeEntry, OpeStore, Order, OwnerState, Remap,
    TableParams,
};
use crate::transport::SessionId;

const MAGIC: &[u8; 8] = b"OOPEDB\0\0";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptedRow {
    pub id: u64,
    /// Public column values, in [`Database::public_columns`] order.
    pub public: Vec<String>,
    /// One order per OPE column, in [`Database::ope_columns`] order.
    pub orders: Vec<Order>,
}

/// Order interval on one OPE column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub column: String,
    pub lower: Bound<Order>,
    pub upper: Bound<Order>,
}

impl Predicate {
    pub fn matches(&self, order: Order) -> bool {
        let lo = match self.lower {
            Bound::Included(b) => order >= b,
            Bound::Excluded(b) => order > b,
            Bound::Unbounded => true,
        };
        let hi = match self.upper {
            Bound::Included(b) => order <= b,
            Bound::Excluded(b) => order < b,
            Bound::Unbounded => true,
        };
        lo && hi
    }
}

/// Order range a plaintext bound maps to: a single order in deterministic
/// mode, the `(c_min, c_max)` pair in frequency-hiding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderBounds {
    pub min: Order,
    pub max: Order,
}

impl OrderBounds {
    pub fn exact(order: Order) -> Self {
        Self { min: order, max: order }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

/// `column op value` on plaintexts, before the bound is encoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    pub column: String,
    pub op: CmpOp,
    pub value: BigUint,
}

impl std::str::FromStr for Condition {
    type Err = Error;

    /// Parses `X1<32`, `X1 >= 7` and the like.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Usage(format!("cannot parse condition {s:?} (expected e.g. X1<32)"));
        let pos = s.find(['<', '>']).ok_or_else(bad)?;
        let column = s[..pos].trim();
        let rest = &s[pos..];
        let (op, value) = match rest.as_bytes() {
            [b'<', b'=', ..] => (CmpOp::Le, &rest[2..]),
            [b'>', b'=', ..] => (CmpOp::Ge, &rest[2..]),
            [b'<', ..] => (CmpOp::Lt, &rest[1..]),
            _ => (CmpOp::Gt, &rest[1..]),
        };
        let value = value.trim();
        if column.is_empty() || value.is_empty() || !value.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        Ok(Self {
            column: column.to_owned(),
            op,
            value: BigUint::parse_bytes(value.as_bytes(), 10).ok_or_else(bad)?,
        })
    }
}

impl Predicate {
    /// Order predicate for `column op bound`. Strict bounds use the outer
    /// edge of the duplicate range so that equal plaintexts are excluded.
    pub fn compare(column: &str, op: CmpOp, bound: OrderBounds) -> Self {
        let (lower, upper) = match op {
            CmpOp::Lt => (Bound::Unbounded, Bound::Excluded(bound.min)),
            CmpOp::Le => (Bound::Unbounded, Bound::Included(bound.max)),
            CmpOp::Gt => (Bound::Excluded(bound.max), Bound::Unbounded),
            CmpOp::Ge => (Bound::Included(bound.min), Bound::Unbounded),
        };
        Self {
            column: column.to_owned(),
            lower,
            upper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    Count,
    Columns(Vec<String>),
}

/// Conjunction of order predicates with a projection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeQuery {
    pub predicates: Vec<Predicate>,
    pub projection: Projection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryResult {
    Count(u64),
    Rows { columns: Vec<String>, rows: Vec<Vec<String>> },
}

impl QueryResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        match self {
            QueryResult::Count(n) => {
                out.write_record(["count"])?;
                out.write_record([n.to_string()])?;
            }
            QueryResult::Rows { columns, rows } => {
                out.write_record(columns)?;
                for r in rows {
                    out.write_record(r)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// One JSON object per line.
    pub fn write_json_lines<W: Write>(&self, mut w: W) -> Result<()> {
        match self {
            QueryResult::Count(n) => writeln!(w, "{}", serde_json::json!({ "count": n }))?,
            QueryResult::Rows { columns, rows } => {
                for r in rows {
                    let obj: serde_json::Map<String, serde_json::Value> = columns
                        .iter()
                        .cloned()
                        .zip(r.iter().map(|v| serde_json::Value::String(v.clone())))
                        .collect();
                    writeln!(w, "{}", serde_json::Value::Object(obj))?;
                }
            }
        }
        Ok(())
    }
}

/// Everything the storage server holds: encrypted tables and rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Database {
    public_columns: Vec<String>,
    ope_columns: Vec<String>,
    stores: Vec<OpeStore>,
    rows: Vec<EncryptedRow>,
}

/// What ingestion hands to the owner and to the server.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub database: Database,
    pub owner: BTreeMap<String, OwnerState>,
}

impl Database {
    /// Database with OPE columns but no rows.
    pub fn empty(public_columns: Vec<String>, ope: Vec<(String, OpeStore)>) -> Result<Self> {
        let (ope_columns, stores): (Vec<_>, Vec<_>) = ope.into_iter().unzip();
        check_unique(public_columns.iter().chain(&ope_columns))?;
        Ok(Self {
            public_columns,
            ope_columns,
            stores,
            rows: Vec::new(),
        })
    }

    pub fn public_columns(&self) -> &[String] {
        &self.public_columns
    }

    pub fn ope_columns(&self) -> &[String] {
        &self.ope_columns
    }

    pub fn rows(&self) -> &[EncryptedRow] {
        &self.rows
    }

    fn ope_index(&self, column: &str) -> Result<usize> {
        self.ope_columns
            .iter()
            .position(|c| c == column)
            .ok_or_else(|| Error::Usage(format!("unknown OPE column {column:?}")))
    }

    pub fn store(&self, column: &str) -> Result<&OpeStore> {
        Ok(&self.stores[self.ope_index(column)?])
    }

    pub fn store_mut(&mut self, column: &str) -> Result<&mut OpeStore> {
        let i = self.ope_index(column)?;
        Ok(&mut self.stores[i])
    }

    /// Moves row orders of `column` after its table was rebalanced.
    pub fn apply_remap(&mut self, column: &str, remap: &Remap) -> Result<()> {
        let i = self.ope_index(column)?;
        for row in &mut self.rows {
            row.orders[i] = remap
                .get(row.orders[i])
                .ok_or_else(|| Error::Integrity(format!("remap misses row order {}", row.orders[i])))?;
        }
        Ok(())
    }

    /// Inserts a table entry; a rebalancing plan also moves the row orders.
    pub fn commit_insert(&mut self, column: &str, entry: OpeEntry, plan: &InsertionPlan) -> Result<()> {
        let i = self.ope_index(column)?;
        if let Some(remap) = &plan.remap {
            if let Some(r) = self.rows.iter().find(|r| remap.get(r.orders[i]).is_none()) {
                return Err(Error::Integrity(format!("remap misses row order {}", r.orders[i])));
            }
        }
        self.stores[i].commit(entry, plan)?;
        if let Some(remap) = &plan.remap {
            self.apply_remap(column, remap)?;
        }
        Ok(())
    }

    pub fn exec_range(&self, query: &RangeQuery) -> Result<QueryResult> {
        let preds: Vec<(usize, &Predicate)> = query
            .predicates
            .iter()
            .map(|p| Ok((self.ope_index(&p.column)?, p)))
            .collect::<Result<_>>()?;
        let selected = self
            .rows
            .iter()
            .filter(|r| preds.iter().all(|(i, p)| p.matches(r.orders[*i])));
        match &query.projection {
            Projection::Count => Ok(QueryResult::Count(selected.count() as u64)),
            Projection::Columns(cols) => {
                let idx: Vec<usize> = cols
                    .iter()
                    .map(|c| {
                        self.public_columns
                            .iter()
                            .position(|p| p == c)
                            .ok_or_else(|| Error::Usage(format!("unknown public column {c:?}")))
                    })
                    .collect::<Result<_>>()?;
                Ok(QueryResult::Rows {
                    columns: cols.clone(),
                    rows: selected
                        .map(|r| idx.iter().map(|&i| r.public[i].clone()).collect())
                        .collect(),
                })
            }
        }
    }

    /// Drops analyst-inserted table entries; rows are never touched.
    pub fn cleanup(&mut self, sessions: &[SessionId]) -> usize {
        let mut removed = 0;
        for store in &mut self.stores {
            removed += store.remove_sessions(sessions).len();
        }
        if removed == 0 && !sessions.is_empty() {
            log::warn!("cleanup matched no analyst entries");
        }
        removed
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = HashWriter {
            inner: w,
            hasher: Sha256::new(),
        };
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_be_bytes())?;
        write_strings(&mut w, &self.public_columns)?;
        write_strings(&mut w, &self.ope_columns)?;
        w.write_all(&(self.rows.len() as u64).to_be_bytes())?;
        for r in &self.rows {
            w.write_all(&r.id.to_be_bytes())?;
            write_strings(&mut w, &r.public)?;
            for o in &r.orders {
                w.write_all(&o.to_be_bytes())?;
            }
        }
        for s in &self.stores {
            let mut buf = Vec::new();
            write_table(s, &mut buf)?;
            w.write_all(&(buf.len() as u64).to_be_bytes())?;
            w.write_all(&buf)?;
        }
        let digest = w.hasher.clone().finalize();
        w.inner.write_all(&digest)?;
        w.inner.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < MAGIC.len() + 2 + 32 {
            return Err(Error::Corrupt("database file truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Corrupt("database checksum mismatch".into()));
        }
        let mut c = Cursor { buf: body };
        if c.take(8)? != MAGIC {
            return Err(Error::Corrupt("not a database file".into()));
        }
        let version = u16::from_be_bytes(c.array()?);
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported database version {version}")));
        }
        let public_columns = c.strings()?;
        let ope_columns = c.strings()?;
        let n_rows = c.u64()?;
        let mut rows = Vec::with_capacity(n_rows.min(1 << 20) as usize);
        for _ in 0..n_rows {
            let id = c.u64()?;
            let public = c.strings()?;
            if public.len() != public_columns.len() {
                return Err(Error::Corrupt("row width mismatch".into()));
            }
            let orders = (0..ope_columns.len())
                .map(|_| Ok(u128::from_be_bytes(c.array()?)))
                .collect::<Result<_>>()?;
            rows.push(EncryptedRow { id, public, orders });
        }
        let mut stores = Vec::with_capacity(ope_columns.len());
        for _ in 0..ope_columns.len() {
            let len = c.u64()? as usize;
            stores.push(read_table(c.take(len)?)?);
        }
        if !c.buf.is_empty() {
            return Err(Error::Corrupt("trailing bytes in database file".into()));
        }
        let db = Self {
            public_columns,
            ope_columns,
            stores,
            rows,
        };
        for (i, store) in db.stores.iter().enumerate() {
            if let Some(r) = db.rows.iter().find(|r| !store.table().contains_key(&r.orders[i])) {
                return Err(Error::Corrupt(format!("row {} references a missing order", r.id)));
            }
        }
        Ok(db)
    }
}

fn check_unique<'a>(names: impl Iterator<Item = &'a String>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Usage(format!("duplicate column {n:?}")));
        }
    }
    Ok(())
}

struct HashWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn write_strings<W: Write>(w: &mut W, items: &[String]) -> io::Result<()> {
    w.write_all(&(items.len() as u32).to_be_bytes())?;
    for s in items {
        w.write_all(&(s.len() as u32).to_be_bytes())?;
        w.write_all(s.as_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Corrupt("database file truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    fn strings(&mut self) -> Result<Vec<String>> {
        let n = u32::from_be_bytes(self.array()?);
        (0..n)
            .map(|_| {
                let len = u32::from_be_bytes(self.array()?) as usize;
                String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Corrupt("invalid UTF-8".into()))
            })
            .collect()
    }
}

/// Encrypts the named columns of a CSV file (header row required). Rows are
/// inserted in file order; all other columns stay public.
pub fn ingest<R: Read, G: RngCore + CryptoRng>(
    csv_data: R,
    ope_columns: &[String],
    params: &TableParams,
    sk: &PrivateKey,
    opts: &InitOptions<'_>,
    rng: &mut G,
) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(csv_data);
    let mut records = reader.records();
    let header: Vec<String> = match records.next() {
        Some(h) => h?.iter().map(str::to_owned).collect(),
        None => Vec::new(),
    };
    check_unique(header.iter())?;
    if header.is_empty() && !ope_columns.is_empty() {
        // an empty file still yields valid, empty tables
        log::info!("empty input; creating empty tables");
    }
    let ope_idx: Vec<usize> = if header.is_empty() {
        Vec::new()
    } else {
        ope_columns
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| Error::Usage(format!("column {c:?} not in the CSV header")))
            })
            .collect::<Result<_>>()?
    };
    check_unique(ope_columns.iter())?;
    let public_idx: Vec<usize> = (0..header.len()).filter(|i| !ope_idx.contains(i)).collect();

    let mut public_rows = Vec::new();
    let mut values: Vec<Vec<BigUint>> = vec![Vec::new(); ope_columns.len()];
    let limit = BigUint::from(1u8) << params.l;
    for (line, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Usage(format!("row {} has {} fields, expected {}", line + 2, rec.len(), header.len())));
        }
        for (k, &i) in ope_idx.iter().enumerate() {
            let field = rec[i].trim();
            let v = BigUint::parse_bytes(field.as_bytes(), 10)
                .filter(|_| !field.is_empty() && field.bytes().all(|b| b.is_ascii_digit()))
                .ok_or_else(|| Error::Domain(format!("row {}: {field:?} is not a non-negative integer", line + 2)))?;
            if v >= limit {
                return Err(Error::Domain(format!("row {}: {v} does not fit in {} bits", line + 2, params.l)));
            }
            values[k].push(v);
        }
        public_rows.push(public_idx.iter().map(|&i| rec[i].to_owned()).collect::<Vec<String>>());
    }

    let mut owner = BTreeMap::new();
    let mut stores = Vec::new();
    let mut column_orders = Vec::new();
    for (name, vals) in ope_columns.iter().zip(&values) {
        let out = init_state(vals, params, sk, opts, rng)?;
        owner.insert(name.clone(), out.owner);
        stores.push((name.clone(), out.store));
        column_orders.push(out.orders);
    }
    let mut database = Database::empty(public_idx.iter().map(|&i| header[i].clone()).collect(), stores)?;
    database.rows = public_rows
        .into_iter()
        .enumerate()
        .map(|(i, public)| EncryptedRow {
            id: i as u64,
            public,
            orders: column_orders.iter().map(|o| o[i]).collect(),
        })
        .collect();
    Ok(Ingested { database, owner })
}
