//! Free-XOR garbling with half-gate AND tables.

use rand::{CryptoRng, Rng, RngCore};
use sha2::{Digest, Sha256};

use super::{BooleanCircuit, CircuitKind, Gate};
use crate::error::{Error, Result};

/// 128-bit wire label.
pub type Label = u128;

const LABEL_BYTES: usize = 16;
const GATE_DOMAIN: u8 = 0x01;
const OUTPUT_DOMAIN: u8 = 0x02;

fn hash_label(domain: u8, label: Label, tweak: u64) -> [u8; LABEL_BYTES] {
    let mut h = Sha256::new();
    h.update([domain]);
    h.update(label.to_be_bytes());
    h.update(tweak.to_be_bytes());
    let digest = h.finalize();
    digest[..LABEL_BYTES].try_into().expect("digest is 32 bytes")
}

fn h(label: Label, tweak: u64) -> Label {
    Label::from_be_bytes(hash_label(GATE_DOMAIN, label, tweak))
}

fn lsb(label: Label) -> bool {
    label & 1 == 1
}

fn select(bit: bool, label: Label) -> Label {
    if bit {
        label
    } else {
        0
    }
}

/// Generator-side secrets: the global offset and every input zero-label.
#[derive(Clone)]
pub struct Encoding {
    delta: Label,
    garbler_zero: Vec<Label>,
    evaluator_zero: Vec<Label>,
}

impl Encoding {
    pub fn garbler_labels(&self, bits: &[bool]) -> Result<Vec<Label>> {
        encode(&self.garbler_zero, bits, self.delta)
    }

    /// `(zero, one)` label pairs for the evaluator's inputs, in wire order.
    pub fn evaluator_pairs(&self) -> Vec<(Label, Label)> {
        self.evaluator_zero.iter().map(|&z| (z, z ^ self.delta)).collect()
    }

    /// Labels the evaluator would obtain for `bits`; for tests without OT.
    pub fn evaluator_labels(&self, bits: &[bool]) -> Result<Vec<Label>> {
        encode(&self.evaluator_zero, bits, self.delta)
    }
}

fn encode(zero: &[Label], bits: &[bool], delta: Label) -> Result<Vec<Label>> {
    if zero.len() != bits.len() {
        return Err(Error::Usage(format!("expected {} input bits, got {}", zero.len(), bits.len())));
    }
    Ok(zero.iter().zip(bits).map(|(&z, &b)| z ^ select(b, delta)).collect())
}

/// Output decoding information: the hashes of both labels of every output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoding {
    entries: Vec<([u8; LABEL_BYTES], [u8; LABEL_BYTES])>,
}

impl Decoding {
    pub fn decode(&self, labels: &[Label]) -> Result<Vec<bool>> {
        if labels.len() != self.entries.len() {
            return Err(Error::DecodeFailed);
        }
        labels
            .iter()
            .zip(&self.entries)
            .enumerate()
            .map(|(i, (&label, (zero, one)))| {
                let digest = hash_label(OUTPUT_DOMAIN, label, i as u64);
                if &digest == zero {
                    Ok(false)
                } else if &digest == one {
                    Ok(true)
                } else {
                    Err(Error::DecodeFailed)
                }
            })
            .collect()
    }
}

/// Public part of a garbling: AND tables and decoding information.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GarbledCircuit {
    kind: CircuitKind,
    width: usize,
    tables: Vec<[Label; 2]>,
    decoding: Decoding,
}

pub fn garble<R: RngCore + CryptoRng>(circuit: &BooleanCircuit, rng: &mut R) -> (GarbledCircuit, Encoding) {
    let delta: Label = rng.gen::<Label>() | 1;
    let mut zero = vec![0 as Label; circuit.wire_count()];
    let n_inputs = circuit.garbler_input_count() + circuit.evaluator_input_count();
    for label in zero.iter_mut().take(n_inputs) {
        *label = rng.gen();
    }

    let mut tables = Vec::with_capacity(circuit.non_free_gates());
    for gate in circuit.gates() {
        match *gate {
            Gate::Xor { a, b, out } => zero[out] = zero[a] ^ zero[b],
            Gate::Not { a, out } => zero[out] = zero[a] ^ delta,
            Gate::And { a, b, out } => {
                let j = tables.len() as u64;
                let (z, table) = garble_and(zero[a], zero[b], delta, j);
                zero[out] = z;
                tables.push(table);
            }
            Gate::Or { a, b, out } => {
                // a | b = !(!a & !b); swapping the roles of the labels
                // negates the inputs, flipping the output negates the result.
                let j = tables.len() as u64;
                let (z, table) = garble_and(zero[a] ^ delta, zero[b] ^ delta, delta, j);
                zero[out] = z ^ delta;
                tables.push(table);
            }
        }
    }

    let entries = circuit
        .outputs()
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            (
                hash_label(OUTPUT_DOMAIN, zero[w], i as u64),
                hash_label(OUTPUT_DOMAIN, zero[w] ^ delta, i as u64),
            )
        })
        .collect();

    let g = circuit.garbler_input_count();
    let encoding = Encoding {
        delta,
        garbler_zero: zero[..g].to_vec(),
        evaluator_zero: zero[g..n_inputs].to_vec(),
    };
    let gc = GarbledCircuit {
        kind: circuit.kind(),
        width: circuit.width(),
        tables,
        decoding: Decoding { entries },
    };
    (gc, encoding)
}

fn garble_and(a0: Label, b0: Label, delta: Label, j: u64) -> (Label, [Label; 2]) {
    let (pa, pb) = (lsb(a0), lsb(b0));
    let (ta, tb) = (2 * j, 2 * j + 1);
    let a1 = a0 ^ delta;
    let b1 = b0 ^ delta;
    let ha0 = h(a0, ta);
    let hb0 = h(b0, tb);
    let tg = ha0 ^ h(a1, ta) ^ select(pb, delta);
    let wg0 = ha0 ^ select(pa, tg);
    let te = hb0 ^ h(b1, tb) ^ a0;
    let we0 = hb0 ^ select(pb, te ^ a0);
    (wg0 ^ we0, [tg, te])
}

fn eval_and(a: Label, b: Label, table: &[Label; 2], j: u64) -> Label {
    let [tg, te] = *table;
    let wg = h(a, 2 * j) ^ select(lsb(a), tg);
    let we = h(b, 2 * j + 1) ^ select(lsb(b), te ^ a);
    wg ^ we
}

impl GarbledCircuit {
    pub fn table_count(&self) -> usize {
        self.tables.len()
    }

    pub fn decoding(&self) -> &Decoding {
        &self.decoding
    }

    /// Evaluates on the given input labels. Consumes the garbling so that
    /// the same tables cannot be evaluated twice.
    pub fn evaluate(
        self,
        circuit: &BooleanCircuit,
        garbler: &[Label],
        evaluator: &[Label],
    ) -> Result<(Vec<Label>, Decoding)> {
        if self.kind != circuit.kind()
            || self.width != circuit.width()
            || self.tables.len() != circuit.non_free_gates()
        {
            return Err(Error::Protocol("garbled circuit does not match expected circuit".into()));
        }
        if garbler.len() != circuit.garbler_input_count() || evaluator.len() != circuit.evaluator_input_count()
        {
            return Err(Error::Protocol("wrong number of input labels".into()));
        }
        let mut wires = vec![0 as Label; circuit.wire_count()];
        wires[..garbler.len()].copy_from_slice(garbler);
        wires[garbler.len()..garbler.len() + evaluator.len()].copy_from_slice(evaluator);
        let mut j = 0usize;
        for gate in circuit.gates() {
            match *gate {
                Gate::Xor { a, b, out } => wires[out] = wires[a] ^ wires[b],
                Gate::Not { a, out } => wires[out] = wires[a],
                Gate::And { a, b, out } | Gate::Or { a, b, out } => {
                    wires[out] = eval_and(wires[a], wires[b], &self.tables[j], j as u64);
                    j += 1;
                }
            }
        }
        let outputs = circuit.outputs().iter().map(|&w| wires[w]).collect();
        Ok((outputs, self.decoding))
    }

    pub fn evaluate_and_decode(
        self,
        circuit: &BooleanCircuit,
        garbler: &[Label],
        evaluator: &[Label],
    ) -> Result<Vec<bool>> {
        let (labels, decoding) = self.evaluate(circuit, garbler, evaluator)?;
        decoding.decode(&labels)
    }

    /// Header (circuit id, width, table count, output count; u32 big-endian),
    /// then one 32-byte record per table and per output.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 2 * LABEL_BYTES * (self.tables.len() + self.decoding.entries.len()));
        out.extend_from_slice(&self.kind.id().to_be_bytes());
        out.extend_from_slice(&(self.width as u32).to_be_bytes());
        out.extend_from_slice(&(self.tables.len() as u32).to_be_bytes());
        out.extend_from_slice(&(self.decoding.entries.len() as u32).to_be_bytes());
        for [tg, te] in &self.tables {
            out.extend_from_slice(&tg.to_be_bytes());
            out.extend_from_slice(&te.to_be_bytes());
        }
        for (zero, one) in &self.decoding.entries {
            out.extend_from_slice(zero);
            out.extend_from_slice(one);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let malformed = || Error::Protocol("malformed garbled circuit".into());
        if bytes.len() < 16 {
            return Err(malformed());
        }
        let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let kind = match word(0) {
            0 => CircuitKind::Custom,
            1 => CircuitKind::Comparator,
            2 => CircuitKind::FrequencyHiding,
            _ => return Err(malformed()),
        };
        let (width, n_tables, n_outputs) = (word(1), word(2), word(3));
        let expected = n_tables
            .checked_add(n_outputs)
            .and_then(|n| n.checked_mul(2 * LABEL_BYTES))
            .and_then(|n| n.checked_add(16))
            .ok_or_else(malformed)?;
        if bytes.len() != expected {
            return Err(malformed());
        }
        let mut records = bytes[16..].chunks_exact(2 * LABEL_BYTES);
        let tables = records
            .by_ref()
            .take(n_tables)
            .map(|r| {
                [
                    Label::from_be_bytes(r[..LABEL_BYTES].try_into().unwrap()),
                    Label::from_be_bytes(r[LABEL_BYTES..].try_into().unwrap()),
                ]
            })
            .collect();
        let entries = records
            .map(|r| (r[..LABEL_BYTES].try_into().unwrap(), r[LABEL_BYTES..].try_into().unwrap()))
            .collect();
        Ok(Self {
            kind,
            width,
            tables,
            decoding: Decoding { entries },
        })
    }
}
