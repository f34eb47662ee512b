//! Transport-free pieces of one oblivious comparison round.

use num_bigint::BigUint;
use rand::{CryptoRng, Rng, RngCore};

use crate::circuits::{garble, BooleanCircuit, ComparatorInput, FhInput, FhOwnerMasks, Label};
use crate::error::{Error, Result};

/// One party's contribution to the server's reconstruction: its own masks
/// and the circuit outputs with those masks removed (still hidden by the
/// other party's masks). Frequency-hiding rounds use only slot 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Shares {
    pub mask: [bool; 2],
    pub masked: [bool; 2],
}

impl Shares {
    pub fn to_byte(self) -> u8 {
        self.mask[0] as u8 | (self.mask[1] as u8) << 1 | (self.masked[0] as u8) << 2 | (self.masked[1] as u8) << 3
    }

    pub fn from_byte(b: u8, slots: usize) -> Result<Self> {
        let allowed: u8 = if slots == 1 { 0b0101 } else { 0b1111 };
        if b & !allowed != 0 {
            return Err(Error::Protocol(format!("share byte {b:#04x} has stray bits")));
        }
        Ok(Self {
            mask: [b & 1 != 0, b & 2 != 0],
            masked: [b & 4 != 0, b & 8 != 0],
        })
    }
}

/// Recovers the `slots` comparison bits, checking that both parties'
/// shares reconstruct the same value.
pub fn combine_shares(round: usize, analyst: &Shares, owner: &Shares, slots: usize) -> Result<Vec<bool>> {
    (0..slots)
        .map(|i| {
            let via_analyst = analyst.masked[i] ^ owner.mask[i];
            let via_owner = owner.masked[i] ^ analyst.mask[i];
            if via_analyst != via_owner {
                return Err(Error::ShareMismatch { round });
            }
            Ok(via_analyst)
        })
        .collect()
}

/// A party's XOR share of the frequency-hiding state carried across rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FhShares {
    pub equal: bool,
    pub random: bool,
}

impl FhShares {
    /// Together these encode "no equal node seen yet" and a zero coin.
    pub const OWNER_INIT: FhShares = FhShares {
        equal: false,
        random: false,
    };
    pub const ANALYST_INIT: FhShares = FhShares {
        equal: true,
        random: false,
    };
}

pub(crate) struct OwnerRound {
    masks: [bool; 2],
    pub fh_next: Option<FhShares>,
}

pub(crate) struct OwnerGarbling {
    pub circuit: Vec<u8>,
    pub garbler_labels: Vec<Label>,
    pub evaluator_pairs: Vec<(Label, Label)>,
    pub round: OwnerRound,
}

pub(crate) fn owner_garble<R: RngCore + CryptoRng>(
    circuit: &BooleanCircuit,
    value: &BigUint,
    fh: Option<FhShares>,
    rng: &mut R,
) -> Result<OwnerGarbling> {
    let masks = [rng.gen(), rng.gen()];
    let mut fresh = FhOwnerMasks::default();
    let fh_input = fh.map(|s| {
        fresh = FhOwnerMasks {
            equal: rng.gen(),
            random: rng.gen(),
        };
        FhInput {
            random_bit: rng.gen(),
            prev_equal_share: s.equal,
            prev_random_share: s.random,
        }
    });
    let input = ComparatorInput {
        value: value.clone(),
        mask_equal: masks[0],
        mask_greater: masks[1],
        fh: fh_input,
    };
    let bits = circuit.garbler_assignment(&input, fresh)?;
    let (gc, encoding) = garble(circuit, rng);
    Ok(OwnerGarbling {
        circuit: gc.to_bytes(),
        garbler_labels: encoding.garbler_labels(&bits)?,
        evaluator_pairs: encoding.evaluator_pairs(),
        round: OwnerRound {
            masks,
            fh_next: fh.map(|_| FhShares {
                equal: fresh.equal,
                random: fresh.random,
            }),
        },
    })
}

/// `from_analyst` are the masked outputs the evaluator forwarded.
pub(crate) fn owner_shares(round: &OwnerRound, from_analyst: &[bool]) -> Shares {
    let mut s = Shares::default();
    for (i, &o) in from_analyst.iter().enumerate().take(2) {
        s.mask[i] = round.masks[i];
        s.masked[i] = o ^ round.masks[i];
    }
    s
}

pub(crate) struct AnalystRound {
    masks: [bool; 2],
    fh: bool,
}

pub(crate) fn analyst_choices<R: RngCore + CryptoRng>(
    circuit: &BooleanCircuit,
    value: &BigUint,
    fh: Option<FhShares>,
    rng: &mut R,
) -> Result<(Vec<bool>, AnalystRound)> {
    let masks = [rng.gen(), rng.gen()];
    let input = ComparatorInput {
        value: value.clone(),
        mask_equal: masks[0],
        mask_greater: masks[1],
        fh: fh.map(|s| FhInput {
            random_bit: rng.gen(),
            prev_equal_share: s.equal,
            prev_random_share: s.random,
        }),
    };
    let bits = circuit.evaluator_assignment(&input)?;
    Ok((
        bits,
        AnalystRound {
            masks,
            fh: fh.is_some(),
        },
    ))
}

pub(crate) struct AnalystFinish {
    pub shares: Shares,
    /// Masked outputs the owner needs for its shares.
    pub to_owner: Vec<bool>,
    pub fh_next: Option<FhShares>,
}

pub(crate) fn analyst_finish(round: &AnalystRound, outputs: &[bool]) -> Result<AnalystFinish> {
    let expected = if round.fh { 3 } else { 2 };
    if outputs.len() != expected {
        return Err(Error::Protocol(format!("circuit produced {} outputs, expected {expected}", outputs.len())));
    }
    let slots = if round.fh { 1 } else { 2 };
    let mut shares = Shares::default();
    for i in 0..slots {
        shares.mask[i] = round.masks[i];
        shares.masked[i] = outputs[i] ^ round.masks[i];
    }
    Ok(AnalystFinish {
        shares,
        to_owner: outputs[..slots].to_vec(),
        fh_next: round.fh.then(|| FhShares {
            equal: outputs[1],
            random: outputs[2],
        }),
    })
}
