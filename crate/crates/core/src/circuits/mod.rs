//! Boolean circuits for masked comparison, their garbling, and the oblivious
//! transfers that hand the evaluator its input labels.

mod garble;
pub mod ot;

pub use garble::{garble, Decoding, Encoding, GarbledCircuit, Label};

use num_bigint::BigUint;

use crate::error::{Error, Result};

pub type WireId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Xor { a: WireId, b: WireId, out: WireId },
    And { a: WireId, b: WireId, out: WireId },
    Or { a: WireId, b: WireId, out: WireId },
    Not { a: WireId, out: WireId },
}

impl Gate {
    pub fn output(&self) -> WireId {
        match *self {
            Gate::Xor { out, .. } | Gate::And { out, .. } | Gate::Or { out, .. } | Gate::Not { out, .. } => out,
        }
    }

    /// Whether garbling this gate produces a table.
    pub fn is_free(&self) -> bool {
        matches!(self, Gate::Xor { .. } | Gate::Not { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CircuitKind {
    Custom,
    Comparator,
    FrequencyHiding,
}

impl CircuitKind {
    pub fn id(self) -> u32 {
        match self {
            CircuitKind::Custom => 0,
            CircuitKind::Comparator => 1,
            CircuitKind::FrequencyHiding => 2,
        }
    }
}

/// A topologically ordered gate list.
///
/// Wires `0..g` are the generator's inputs, `g..g+e` the evaluator's, and
/// every gate output is a fresh wire numbered after all earlier ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BooleanCircuit {
    kind: CircuitKind,
    width: usize,
    garbler_inputs: usize,
    evaluator_inputs: usize,
    wire_count: usize,
    gates: Vec<Gate>,
    outputs: Vec<WireId>,
}

impl BooleanCircuit {
    pub fn kind(&self) -> CircuitKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn garbler_input_count(&self) -> usize {
        self.garbler_inputs
    }

    pub fn evaluator_input_count(&self) -> usize {
        self.evaluator_inputs
    }

    pub fn wire_count(&self) -> usize {
        self.wire_count
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn outputs(&self) -> &[WireId] {
        &self.outputs
    }

    pub fn non_free_gates(&self) -> usize {
        self.gates.iter().filter(|g| !g.is_free()).count()
    }

    /// Evaluates every wire in the clear.
    pub fn eval_wires(&self, garbler: &[bool], evaluator: &[bool]) -> Result<Vec<bool>> {
        if garbler.len() != self.garbler_inputs || evaluator.len() != self.evaluator_inputs {
            return Err(Error::Usage(format!(
                "circuit takes {}+{} input bits, got {}+{}",
                self.garbler_inputs,
                self.evaluator_inputs,
                garbler.len(),
                evaluator.len()
            )));
        }
        let mut wires = Vec::with_capacity(self.wire_count);
        wires.extend_from_slice(garbler);
        wires.extend_from_slice(evaluator);
        wires.resize(self.wire_count, false);
        for gate in &self.gates {
            let (out, v) = match *gate {
                Gate::Xor { a, b, out } => (out, wires[a] ^ wires[b]),
                Gate::And { a, b, out } => (out, wires[a] & wires[b]),
                Gate::Or { a, b, out } => (out, wires[a] | wires[b]),
                Gate::Not { a, out } => (out, !wires[a]),
            };
            wires[out] = v;
        }
        Ok(wires)
    }
}

/// Reference evaluator; the oracle for garbled evaluation.
pub fn eval_plain(circuit: &BooleanCircuit, garbler: &[bool], evaluator: &[bool]) -> Result<Vec<bool>> {
    let wires = circuit.eval_wires(garbler, evaluator)?;
    Ok(circuit.outputs.iter().map(|&w| wires[w]).collect())
}

pub struct CircuitBuilder {
    garbler_inputs: usize,
    evaluator_inputs: usize,
    next: WireId,
    gates: Vec<Gate>,
}

impl CircuitBuilder {
    pub fn new(garbler_inputs: usize, evaluator_inputs: usize) -> Self {
        Self {
            garbler_inputs,
            evaluator_inputs,
            next: garbler_inputs + evaluator_inputs,
            gates: Vec::new(),
        }
    }

    pub fn garbler_input(&self, i: usize) -> WireId {
        assert!(i < self.garbler_inputs);
        i
    }

    pub fn evaluator_input(&self, i: usize) -> WireId {
        assert!(i < self.evaluator_inputs);
        self.garbler_inputs + i
    }

    fn push(&mut self, make: impl FnOnce(WireId) -> Gate) -> WireId {
        let out = self.next;
        self.next += 1;
        self.gates.push(make(out));
        out
    }

    pub fn xor(&mut self, a: WireId, b: WireId) -> WireId {
        self.push(|out| Gate::Xor { a, b, out })
    }

    pub fn and(&mut self, a: WireId, b: WireId) -> WireId {
        self.push(|out| Gate::And { a, b, out })
    }

    pub fn or(&mut self, a: WireId, b: WireId) -> WireId {
        self.push(|out| Gate::Or { a, b, out })
    }

    pub fn not(&mut self, a: WireId) -> WireId {
        self.push(|out| Gate::Not { a, out })
    }

    pub fn finish(self, outputs: Vec<WireId>) -> BooleanCircuit {
        self.finish_as(CircuitKind::Custom, 0, outputs)
    }

    fn finish_as(self, kind: CircuitKind, width: usize, outputs: Vec<WireId>) -> BooleanCircuit {
        BooleanCircuit {
            kind,
            width,
            garbler_inputs: self.garbler_inputs,
            evaluator_inputs: self.evaluator_inputs,
            wire_count: self.next,
            gates: self.gates,
            outputs,
        }
    }
}

/// Emits the equality and greater-than chains, least significant bit first.
///
/// Returns `(c_e, c_g)` with `c_e = [xbar != x]` and `c_g = [xbar > x]`.
fn comparison_chain(b: &mut CircuitBuilder, width: usize, x: WireId, xbar: WireId) -> (WireId, WireId) {
    let zero = b.xor(x, x);
    let mut ce = zero;
    let mut cg = zero;
    for j in 0..width {
        let xj = x + j;
        let xbarj = xbar + j;
        let diff = b.xor(xbarj, xj);
        ce = b.or(diff, ce);
        let l = b.xor(xbarj, cg);
        let r = b.xor(xj, cg);
        let both = b.and(l, r);
        cg = b.xor(both, xbarj);
    }
    (ce, cg)
}

/// Input layout of the plain comparator.
///
/// Generator: `x` bits (LSB first), `b_o`, `b'_o`.
/// Evaluator: `xbar` bits (LSB first), `b_a`, `b'_a`.
/// Outputs: `c_e ^ b_o ^ b_a`, `c_g ^ b'_o ^ b'_a`.
pub fn build_comparator(width: usize) -> Result<BooleanCircuit> {
    if width == 0 {
        return Err(Error::Domain("comparator width must be at least 1".into()));
    }
    let mut b = CircuitBuilder::new(width + 2, width + 2);
    let x = b.garbler_input(0);
    let xbar = b.evaluator_input(0);
    let (ce, cg) = comparison_chain(&mut b, width, x, xbar);
    let (bo, bo2) = (b.garbler_input(width), b.garbler_input(width + 1));
    let (ba, ba2) = (b.evaluator_input(width), b.evaluator_input(width + 1));
    let t = b.xor(ce, bo);
    let out_e = b.xor(t, ba);
    let t = b.xor(cg, bo2);
    let out_g = b.xor(t, ba2);
    Ok(b.finish_as(CircuitKind::Comparator, width, vec![out_e, out_g]))
}

/// Input layout of the frequency-hiding comparator.
///
/// Generator: `x` bits, `b_o`, `r_x`, equality share, random share, fresh
/// equality mask, fresh random mask.
/// Evaluator: `xbar` bits, `b_a`, `r_xbar`, equality share, random share.
/// Outputs: traversal bit masked by `b_o ^ b_a`, then the new equality and
/// random state each masked by the generator's fresh masks.
///
/// The shared equality state is 1 while no equal node has been seen.
pub fn build_fh_comparator(width: usize) -> Result<BooleanCircuit> {
    if width == 0 {
        return Err(Error::Domain("comparator width must be at least 1".into()));
    }
    let mut b = CircuitBuilder::new(width + 6, width + 4);
    let x = b.garbler_input(0);
    let xbar = b.evaluator_input(0);
    let (be, bg) = comparison_chain(&mut b, width, x, xbar);
    let g = |i| width + i;
    let (bo, rx, se_o, sr_o, me, mr) = (g(0), g(1), g(2), g(3), g(4), g(5));
    let e = |i| b.evaluator_input(width + i);
    let (ba, rxbar, se_a, sr_a) = (e(0), e(1), e(2), e(3));

    let prev_e = b.xor(se_o, se_a);
    let prev_r = b.xor(sr_o, sr_a);
    let coin = b.xor(rx, rxbar);
    // rc = prev_e ? coin : prev_r
    let t = b.xor(coin, prev_r);
    let t = b.and(prev_e, t);
    let rc = b.xor(prev_r, t);
    // bit = be ? bg : rc
    let t = b.xor(bg, rc);
    let t = b.and(be, t);
    let bit = b.xor(rc, t);

    let t = b.xor(bit, bo);
    let out_b = b.xor(t, ba);
    let out_e = b.xor(be, me);
    let out_r = b.xor(bit, mr);
    Ok(b.finish_as(CircuitKind::FrequencyHiding, width, vec![out_b, out_e, out_r]))
}

/// Per-round extra inputs of the frequency-hiding comparator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FhInput {
    pub random_bit: bool,
    pub prev_equal_share: bool,
    pub prev_random_share: bool,
}

/// One party's comparator input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparatorInput {
    pub value: BigUint,
    pub mask_equal: bool,
    pub mask_greater: bool,
    pub fh: Option<FhInput>,
}

/// Fresh masks the generator applies to the re-shared state outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FhOwnerMasks {
    pub equal: bool,
    pub random: bool,
}

/// Little-endian bit decomposition of `value` into exactly `width` bits.
pub fn value_bits(value: &BigUint, width: usize) -> Result<Vec<bool>> {
    if value.bits() as usize > width {
        return Err(Error::Domain(format!("value does not fit in {width} bits")));
    }
    Ok((0..width as u64).map(|i| value.bit(i)).collect())
}

impl BooleanCircuit {
    pub fn garbler_assignment(&self, input: &ComparatorInput, masks: FhOwnerMasks) -> Result<Vec<bool>> {
        let mut bits = value_bits(&input.value, self.width)?;
        match (self.kind, input.fh) {
            (CircuitKind::Comparator, None) => {
                bits.push(input.mask_equal);
                bits.push(input.mask_greater);
            }
            (CircuitKind::FrequencyHiding, Some(fh)) => {
                bits.extend([
                    input.mask_equal,
                    fh.random_bit,
                    fh.prev_equal_share,
                    fh.prev_random_share,
                    masks.equal,
                    masks.random,
                ]);
            }
            _ => return Err(Error::Usage("input does not match circuit kind".into())),
        }
        Ok(bits)
    }

    pub fn evaluator_assignment(&self, input: &ComparatorInput) -> Result<Vec<bool>> {
        let mut bits = value_bits(&input.value, self.width)?;
        match (self.kind, input.fh) {
            (CircuitKind::Comparator, None) => {
                bits.push(input.mask_equal);
                bits.push(input.mask_greater);
            }
            (CircuitKind::FrequencyHiding, Some(fh)) => {
                bits.extend([input.mask_equal, fh.random_bit, fh.prev_equal_share, fh.prev_random_share]);
            }
            _ => return Err(Error::Usage("input does not match circuit kind".into())),
        }
        Ok(bits)
    }
}
