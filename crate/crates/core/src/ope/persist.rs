//! Versioned flat-file encoding of an [`OpeStore`].
//!
//! Layout (big-endian):
//! header | entries | tree preorder | SHA-256 of everything before it.

use std::io::{self, Read, Write};

use num_bigint::BigUint;
use sha2::{Digest, Sha256};

use super::table::StoreLayout;
use super::{Mode, NodeValue, OpeEntry, OpeStore, OpeTable, OpeTree, Order, Origin, TableParams};
use crate::error::{Error, Result};
use crate::homcrypto::HomCiphertext;
use crate::integrity::{IntegrityMode, NodeTag};
use crate::transport::SessionId;

const MAGIC: &[u8; 8] = b"OOPETBL\0";
const VERSION: u16 = 1;
pub const TABLE_HEADER_LEN: usize = 8 + 2 + 2 + 2 + 16 + 1 + 1 + 4 + 4 + 8;
const TRAILER_LEN: usize = 32;

const FLAG_ANALYST: u8 = 1;
const FLAG_UID: u8 = 2;
const FLAG_FH: u8 = 4;
const FLAG_TAG: u8 = 8;

/// Byte accounting of one serialized table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableSizeReport {
    pub entries: u64,
    /// `entries * (2 log2 N + log2 M)` bits.
    pub payload_bits: u128,
    pub payload_bytes: u64,
    pub header_bytes: u64,
    /// Per-entry bytes beyond the payload, summed over all entries.
    pub entry_framing_bytes: u64,
    pub tree_bytes: u64,
    pub trailer_bytes: u64,
    pub total_bytes: u64,
}

impl TableSizeReport {
    pub fn framing_bytes(&self) -> u64 {
        self.total_bytes - self.payload_bytes
    }
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
    written: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

struct HashingReader<R> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> Read for HashingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}

fn header_bytes(params: &TableParams, layout: &StoreLayout, entries: u64) -> Result<Vec<u8>> {
    let too_wide = |what: &str| Error::Usage(format!("{what} does not fit the table header"));
    let mut h = Vec::with_capacity(TABLE_HEADER_LEN);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_be_bytes());
    h.extend_from_slice(&u16::try_from(params.l).map_err(|_| too_wide("l"))?.to_be_bytes());
    h.extend_from_slice(&(params.log2m as u16).to_be_bytes());
    h.extend_from_slice(&params.max_order.to_be_bytes());
    h.push(params.mode.code());
    h.push(layout.integrity.code());
    h.extend_from_slice(&u32::try_from(layout.cipher_width).map_err(|_| too_wide("cipher width"))?.to_be_bytes());
    h.extend_from_slice(&u32::try_from(layout.tag_width).map_err(|_| too_wide("tag width"))?.to_be_bytes());
    h.extend_from_slice(&entries.to_be_bytes());
    Ok(h)
}

fn fixed_bytes(v: &BigUint, width: usize) -> Result<Vec<u8>> {
    let b = v.to_bytes_be();
    if b.len() > width {
        return Err(Error::Usage(format!("value of {} bytes exceeds width {width}", b.len())));
    }
    let mut out = vec![0u8; width - b.len()];
    out.extend_from_slice(&b);
    Ok(out)
}

fn encode_entry(e: &OpeEntry, layout: &StoreLayout, out: &mut Vec<u8>) -> Result<()> {
    let width = layout.cipher_width;
    let mut flags = 0u8;
    if matches!(e.origin, Origin::Analyst(_)) {
        flags |= FLAG_ANALYST;
    }
    if matches!(e.value, NodeValue::Uid(_)) {
        flags |= FLAG_UID;
    }
    match (&e.fh_min, &e.fh_max) {
        (Some(_), Some(_)) => flags |= FLAG_FH,
        (None, None) => {}
        _ => return Err(Error::Usage("entry carries only one frequency-hiding bound".into())),
    }
    if let Some(tag) = &e.tag {
        if tag.mode() != layout.integrity {
            return Err(Error::Usage(format!("{} tag in a {} table", tag.mode(), layout.integrity)));
        }
        flags |= FLAG_TAG;
    }
    out.push(flags);
    if let Origin::Analyst(sid) = e.origin {
        out.extend_from_slice(&sid.0);
    }
    out.extend_from_slice(&e.order.to_be_bytes());
    match &e.value {
        NodeValue::Cipher(c) => c.encode_into(width, out),
        NodeValue::Uid(u) => out.extend_from_slice(u),
    }
    if let (Some(lo), Some(hi)) = (&e.fh_min, &e.fh_max) {
        lo.encode_into(width, out);
        hi.encode_into(width, out);
    }
    match &e.tag {
        None => {}
        Some(NodeTag::DlMac(mac)) => out.extend_from_slice(&fixed_bytes(mac, layout.tag_width)?),
        Some(NodeTag::Pedersen { commitment, blinding }) => {
            out.extend_from_slice(&fixed_bytes(commitment, layout.tag_width)?);
            blinding.encode_into(width, out);
        }
    }
    Ok(())
}

fn read_cipher<R: Read>(r: &mut R, width: usize) -> Result<HomCiphertext> {
    let mut buf = vec![0u8; HomCiphertext::encoded_len(width)];
    r.read_exact(&mut buf)?;
    let (c, used) = HomCiphertext::decode(&buf)?;
    if used != buf.len() {
        return Err(Error::Corrupt("ciphertext record width differs from the header".into()));
    }
    Ok(c)
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn decode_entry<R: Read>(r: &mut R, layout: &StoreLayout) -> Result<OpeEntry> {
    let [flags] = read_array::<_, 1>(r)?;
    if flags & !(FLAG_ANALYST | FLAG_UID | FLAG_FH | FLAG_TAG) != 0 {
        return Err(Error::Corrupt(format!("unknown entry flags {flags:#x}")));
    }
    let origin = if flags & FLAG_ANALYST != 0 {
        Origin::Analyst(SessionId(read_array(r)?))
    } else {
        Origin::Owner
    };
    let order = u128::from_be_bytes(read_array(r)?);
    let value = if flags & FLAG_UID != 0 {
        NodeValue::Uid(read_array(r)?)
    } else {
        NodeValue::Cipher(read_cipher(r, layout.cipher_width)?)
    };
    let (fh_min, fh_max) = if flags & FLAG_FH != 0 {
        (
            Some(read_cipher(r, layout.cipher_width)?),
            Some(read_cipher(r, layout.cipher_width)?),
        )
    } else {
        (None, None)
    };
    let tag = if flags & FLAG_TAG != 0 {
        let mut g = vec![0u8; layout.tag_width];
        r.read_exact(&mut g)?;
        let g = BigUint::from_bytes_be(&g);
        Some(match layout.integrity {
            IntegrityMode::DlMac => NodeTag::DlMac(g),
            IntegrityMode::Pedersen => NodeTag::Pedersen {
                commitment: g,
                blinding: read_cipher(r, layout.cipher_width)?,
            },
            IntegrityMode::Off => return Err(Error::Corrupt("tagged entry in a table without integrity".into())),
        })
    } else {
        None
    };
    Ok(OpeEntry {
        value,
        order,
        fh_min,
        fh_max,
        tag,
        origin,
    })
}

fn payload_bits(layout: &StoreLayout, params: &TableParams) -> u128 {
    8 * layout.cipher_width as u128 + u128::from(params.log2m)
}

fn finish_report(params: &TableParams, layout: &StoreLayout, entries: u64, entry_bytes: u64, total: u64) -> TableSizeReport {
    let payload_bits = u128::from(entries) * payload_bits(layout, params);
    let payload_bytes = payload_bits.div_ceil(8) as u64;
    TableSizeReport {
        entries,
        payload_bits,
        payload_bytes,
        header_bytes: TABLE_HEADER_LEN as u64,
        entry_framing_bytes: entry_bytes - payload_bytes,
        tree_bytes: 8 + 16 * entries,
        trailer_bytes: TRAILER_LEN as u64,
        total_bytes: total,
    }
}

/// Serializes `store` and reports where the bytes went.
pub fn write_table<W: Write>(store: &OpeStore, w: W) -> Result<TableSizeReport> {
    let params = store.params();
    let layout = store.layout();
    let mut hw = HashingWriter {
        inner: w,
        hasher: Sha256::new(),
        written: 0,
    };
    let n = store.len() as u64;
    hw.write_all(&header_bytes(params, layout, n)?)?;
    let mut buf = Vec::new();
    let mut entry_bytes = 0u64;
    for e in store.table().values() {
        buf.clear();
        encode_entry(e, layout, &mut buf)?;
        entry_bytes += buf.len() as u64;
        hw.write_all(&buf)?;
    }
    write_tree(&mut hw, store.tree().preorder().into_iter(), n)?;
    finish(hw, params, layout, n, entry_bytes)
}

fn write_tree<W: Write>(w: &mut W, preorder: impl Iterator<Item = Order>, n: u64) -> Result<()> {
    w.write_all(&n.to_be_bytes())?;
    for o in preorder {
        w.write_all(&o.to_be_bytes())?;
    }
    Ok(())
}

fn finish<W: Write>(
    mut hw: HashingWriter<W>,
    params: &TableParams,
    layout: &StoreLayout,
    n: u64,
    entry_bytes: u64,
) -> Result<TableSizeReport> {
    let digest = hw.hasher.clone().finalize();
    hw.inner.write_all(&digest)?;
    hw.inner.flush()?;
    let total = hw.written + TRAILER_LEN as u64;
    Ok(finish_report(params, layout, n, entry_bytes, total))
}

/// Writes a table of `n` copies of `template` at uniformly spread orders
/// with a balanced tree, without materializing it. Byte-identical to
/// [`write_table`] on the equivalent store.
pub fn write_synthetic_table<W: Write>(
    params: &TableParams,
    layout: &StoreLayout,
    template: &OpeEntry,
    n: u64,
    w: W,
) -> Result<TableSizeReport> {
    if u128::from(n) + 1 >= params.max_order {
        return Err(Error::Capacity {
            entries: n as usize,
            max_order: params.max_order,
        });
    }
    let d = u128::from(n) + 1;
    let (q, rem) = (params.max_order / d, params.max_order % d);
    let order_of = |i: u64| -> Order {
        // rank i is 1-based
        let i = u128::from(i);
        i * q + (i * rem).div_ceil(d)
    };
    let mut hw = HashingWriter {
        inner: w,
        hasher: Sha256::new(),
        written: 0,
    };
    hw.write_all(&header_bytes(params, layout, n)?)?;
    let mut buf = Vec::new();
    let mut entry = template.clone();
    entry.order = 0;
    encode_entry(&entry, layout, &mut buf)?;
    // the order field sits after the flags byte and optional session id
    let order_at = 1 + if matches!(template.origin, Origin::Analyst(_)) { 16 } else { 0 };
    let mut entry_bytes = 0u64;
    for i in 1..=n {
        buf[order_at..order_at + 16].copy_from_slice(&order_of(i).to_be_bytes());
        hw.write_all(&buf)?;
        entry_bytes += buf.len() as u64;
    }
    // median-split preorder over ranks [1, n], matching OpeTree::balanced
    hw.write_all(&n.to_be_bytes())?;
    let mut stack = vec![(1u64, n + 1)];
    while let Some((lo, hi)) = stack.pop() {
        if lo >= hi {
            continue;
        }
        let mid = lo + (hi - lo) / 2;
        hw.write_all(&order_of(mid).to_be_bytes())?;
        stack.push((mid + 1, hi));
        stack.push((lo, mid));
    }
    finish(hw, params, layout, n, entry_bytes)
}

/// Reads and verifies a table written by [`write_table`].
pub fn read_table<R: Read>(r: R) -> Result<OpeStore> {
    let mut hr = HashingReader {
        inner: r,
        hasher: Sha256::new(),
    };
    let map_eof = |e: Error| match e {
        Error::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof => Error::Corrupt("table file truncated".into()),
        e => e,
    };
    let header: [u8; TABLE_HEADER_LEN] = read_array(&mut hr).map_err(map_eof)?;
    if &header[..8] != MAGIC {
        return Err(Error::Corrupt("not a table file".into()));
    }
    let u16_at = |i: usize| u16::from_be_bytes([header[i], header[i + 1]]);
    let u32_at = |i: usize| u32::from_be_bytes(header[i..i + 4].try_into().expect("4 bytes"));
    if u16_at(8) != VERSION {
        return Err(Error::Corrupt(format!("unsupported table version {}", u16_at(8))));
    }
    let l = u32::from(u16_at(10));
    let log2m = u32::from(u16_at(12));
    let max_order = u128::from_be_bytes(header[14..30].try_into().expect("16 bytes"));
    let mode = Mode::from_code(header[30])?;
    let integrity = IntegrityMode::from_code(header[31]).map_err(|_| Error::Corrupt("unknown integrity mode".into()))?;
    let layout = StoreLayout {
        cipher_width: u32_at(32) as usize,
        integrity,
        tag_width: u32_at(36) as usize,
    };
    if layout.cipher_width > 1 << 16 || layout.tag_width > 1 << 16 {
        return Err(Error::Corrupt("record widths out of range".into()));
    }
    let n = u64::from_be_bytes(header[40..48].try_into().expect("8 bytes"));
    let params = TableParams::with_max_order(l, max_order, mode).map_err(|e| Error::Corrupt(e.to_string()))?;
    if params.log2m != log2m {
        return Err(Error::Corrupt("log2m does not match the maximum order".into()));
    }

    let mut table = OpeTable::new();
    for _ in 0..n {
        let e = decode_entry(&mut hr, &layout).map_err(map_eof)?;
        if table.insert(e.order, e).is_some() {
            return Err(Error::Corrupt("duplicate order".into()));
        }
    }
    let count = u64::from_be_bytes(read_array(&mut hr).map_err(map_eof)?);
    if count != n {
        return Err(Error::Corrupt("tree size differs from entry count".into()));
    }
    let mut preorder = Vec::with_capacity(n.min(1 << 24) as usize);
    for _ in 0..n {
        preorder.push(u128::from_be_bytes(read_array(&mut hr).map_err(map_eof)?));
    }
    let expected = hr.hasher.clone().finalize();
    let trailer: [u8; TRAILER_LEN] = read_array(&mut hr.inner).map_err(map_eof)?;
    if expected.as_slice() != trailer {
        return Err(Error::Corrupt("table checksum mismatch".into()));
    }
    let mut rest = [0u8; 1];
    if hr.inner.read(&mut rest)? != 0 {
        return Err(Error::Corrupt("trailing bytes after table".into()));
    }
    let tree = OpeTree::from_preorder(&preorder)?;
    OpeStore::from_parts(params, layout, table, tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homcrypto::keygen_for_testing;
    use crate::integrity::MacParams;
    use crate::ope::{init_state, InitOptions, Side, TreeShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn roundtrip(store: &OpeStore) -> (Vec<u8>, TableSizeReport) {
        let mut buf = Vec::new();
        let report = write_table(store, &mut buf).unwrap();
        assert_eq!(report.total_bytes as usize, buf.len());
        let back = read_table(&buf[..]).unwrap();
        assert_eq!(&back, store);
        let mut again = Vec::new();
        write_table(&back, &mut again).unwrap();
        assert_eq!(again, buf);
        (buf, report)
    }

    #[test]
    fn deterministic_roundtrip_and_accounting() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (pk, sk) = keygen_for_testing(256, &mut rng).unwrap();
        let params = TableParams::new(16, 32, Mode::Deterministic).unwrap();
        let data: Vec<BigUint> = (0..50).map(|_| BigUint::from(rng.gen::<u16>())).collect();
        let opts = InitOptions {
            shape: TreeShape::Insertion,
            ..Default::default()
        };
        let mut store = init_state(&data, &params, &sk, &opts, &mut rng).unwrap().store;
        // one analyst entry and one uid entry
        let root = store.root().unwrap();
        let mut leaf = root;
        while let Some(c) = store.child(leaf, Side::Right).unwrap() {
            leaf = c;
        }
        let plan = store.plan_insert(Some((leaf, Side::Right)), false).unwrap();
        let mut e = OpeEntry::owner(pk.encrypt(&BigUint::from(7u8), None, &mut rng).unwrap(), 0);
        e.origin = Origin::Analyst(SessionId([3; 16]));
        e.value = NodeValue::Uid([9; 16]);
        store.commit(e, &plan).unwrap();

        let (buf, report) = roundtrip(&store);
        let n = store.len() as u64;
        assert_eq!(report.payload_bytes, n * (2 * 256 + 32) / 8);
        assert_eq!(
            report.total_bytes,
            report.payload_bytes
                + report.header_bytes
                + report.entry_framing_bytes
                + report.tree_bytes
                + report.trailer_bytes
        );
        assert_eq!(buf.len() as u64, report.payload_bytes + report.framing_bytes());
    }

    #[test]
    fn fh_and_tags_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (_, sk) = keygen_for_testing(512, &mut rng).unwrap();
        let mac = MacParams::generate_for_testing(512, &mut rng).unwrap();
        let params = TableParams::new(8, 60, Mode::FrequencyHiding).unwrap();
        let data: Vec<BigUint> = (0..30).map(|_| BigUint::from(rng.gen_range(0u8..5))).collect();
        for integrity in [IntegrityMode::DlMac, IntegrityMode::Pedersen] {
            let opts = InitOptions {
                integrity,
                mac_params: Some(&mac),
                ..Default::default()
            };
            let store = init_state(&data, &params, &sk, &opts, &mut rng).unwrap().store;
            assert!(store.table().values().all(|e| e.tag.as_ref().map(NodeTag::mode) == Some(integrity)));
            roundtrip(&store);
        }
    }

    #[test]
    fn corruption_detected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (_, sk) = keygen_for_testing(64, &mut rng).unwrap();
        let params = TableParams::new(8, 20, Mode::Deterministic).unwrap();
        let data: Vec<BigUint> = (1..10u8).map(BigUint::from).collect();
        let store = init_state(&data, &params, &sk, &InitOptions::default(), &mut rng).unwrap().store;
        let (buf, _) = roundtrip(&store);
        for pos in [0, 20, TABLE_HEADER_LEN + 5, buf.len() - 40, buf.len() - 1] {
            let mut bad = buf.clone();
            bad[pos] ^= 1;
            assert!(matches!(read_table(&bad[..]), Err(Error::Corrupt(_))), "flip at {pos}");
        }
        assert!(matches!(read_table(&buf[..buf.len() - 3]), Err(Error::Corrupt(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_table(&long[..]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn synthetic_matches_materialized() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (pk, _) = keygen_for_testing(128, &mut rng).unwrap();
        let params = TableParams::new(32, 32, Mode::Deterministic).unwrap();
        let layout = StoreLayout {
            cipher_width: pk.ciphertext_width(),
            integrity: IntegrityMode::Off,
            tag_width: 0,
        };
        let template = OpeEntry::owner(pk.encrypt(&BigUint::from(5u8), None, &mut rng).unwrap(), 0);
        for n in [0u64, 1, 2, 3, 7, 1000] {
            let mut synth = Vec::new();
            let report = write_synthetic_table(&params, &layout, &template, n, &mut synth).unwrap();
            let mut store = OpeStore::new(params, layout);
            let orders = crate::ope::spread_orders(n as usize, params.max_order).unwrap();
            for &o in &orders {
                let mut e = template.clone();
                e.order = o;
                store.insert_entry(e, None).unwrap();
            }
            store.rebuild_balanced().unwrap();
            let mut real = Vec::new();
            assert_eq!(write_table(&store, &mut real).unwrap(), report);
            assert_eq!(synth, real, "n={n}");
        }
    }
}
