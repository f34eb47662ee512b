//! Oblivious transfer of wire labels.
//!
//! A link runs [`BASE_OTS`] base transfers once (Chou-Orlandi over
//! Ristretto) and then extends them IKNP-style for every batch of choice
//! bits. Roles are reversed in the base phase: the extension receiver acts
//! as base sender, and the extension sender picks the secret column mask.

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::Label;
use crate::error::{Error, Result};

pub const BASE_OTS: usize = 128;

type Key = [u8; 32];

fn base_key(index: usize, a: &CompressedRistretto, b: &CompressedRistretto, point: &RistrettoPoint) -> Key {
    let mut h = Sha256::new();
    h.update(b"base-ot");
    h.update((index as u64).to_be_bytes());
    h.update(a.as_bytes());
    h.update(b.as_bytes());
    h.update(point.compress().as_bytes());
    h.finalize().into()
}

fn decompress(bytes: &[u8; 32]) -> Result<RistrettoPoint> {
    CompressedRistretto(*bytes)
        .decompress()
        .ok_or_else(|| Error::Protocol("malformed group element in oblivious transfer".into()))
}

/// Base-phase sender: holds two keys per transfer.
pub struct BaseOtSender {
    a: Scalar,
    big_a: RistrettoPoint,
}

impl BaseOtSender {
    /// Returns the sender state and its first message.
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> (Self, [u8; 32]) {
        let a = Scalar::random(rng);
        let big_a = RISTRETTO_BASEPOINT_TABLE * &a;
        let msg = big_a.compress().to_bytes();
        (Self { a, big_a }, msg)
    }

    pub fn finish(self, reply: &[[u8; 32]]) -> Result<Vec<(Key, Key)>> {
        if reply.len() != BASE_OTS {
            return Err(Error::Protocol(format!("expected {BASE_OTS} base transfers, got {}", reply.len())));
        }
        let a_c = self.big_a.compress();
        reply
            .iter()
            .enumerate()
            .map(|(i, b_bytes)| {
                let b = decompress(b_bytes)?;
                let b_c = CompressedRistretto(*b_bytes);
                let k0 = base_key(i, &a_c, &b_c, &(self.a * b));
                let k1 = base_key(i, &a_c, &b_c, &(self.a * (b - self.big_a)));
                Ok((k0, k1))
            })
            .collect()
    }
}

/// Base-phase receiver: answers the sender's point and learns one key per
/// transfer according to `choices`.
pub fn base_ot_receive<R: RngCore + CryptoRng>(
    sender_msg: &[u8; 32],
    choices: &[bool],
    rng: &mut R,
) -> Result<(Vec<[u8; 32]>, Vec<Key>)> {
    let big_a = decompress(sender_msg)?;
    let a_c = CompressedRistretto(*sender_msg);
    let mut reply = Vec::with_capacity(choices.len());
    let mut keys = Vec::with_capacity(choices.len());
    for (i, &c) in choices.iter().enumerate() {
        let b = Scalar::random(rng);
        let mut big_b = RISTRETTO_BASEPOINT_TABLE * &b;
        if c {
            big_b += big_a;
        }
        let b_c = big_b.compress();
        keys.push(base_key(i, &a_c, &b_c, &(b * big_a)));
        reply.push(b_c.to_bytes());
    }
    Ok((reply, keys))
}

fn row_hash(index: u64, row: u128) -> Label {
    let mut h = Sha256::new();
    h.update(b"iknp");
    h.update(index.to_be_bytes());
    h.update(row.to_be_bytes());
    Label::from_be_bytes(h.finalize()[..16].try_into().expect("digest is 32 bytes"))
}

fn padded_len(n: usize) -> usize {
    n.div_ceil(8) * 8
}

fn draw(stream: &mut ChaCha20Rng, bytes: usize) -> Vec<u8> {
    let mut out = vec![0u8; bytes];
    stream.fill_bytes(&mut out);
    out
}

/// Transposes 128 columns of `m` bits into `m` rows of 128 bits.
fn transpose(columns: &[Vec<u8>], m: usize) -> Vec<u128> {
    let mut rows = vec![0u128; m];
    for (i, col) in columns.iter().enumerate() {
        for (j, row) in rows.iter_mut().enumerate() {
            if (col[j / 8] >> (j % 8)) & 1 == 1 {
                *row |= 1u128 << i;
            }
        }
    }
    rows
}

/// Extension request: one masked column per base transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtRequest {
    pub count: usize,
    pub columns: Vec<Vec<u8>>,
}

/// Extension reply: both masked labels per transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtResponse {
    pub pairs: Vec<(Label, Label)>,
}

/// Receiver state for one outstanding batch.
pub struct PendingBatch {
    start: u64,
    choices: Vec<bool>,
    rows: Vec<u128>,
}

/// Extension receiver (the circuit evaluator).
pub struct OtReceiver {
    streams: Vec<(ChaCha20Rng, ChaCha20Rng)>,
    counter: u64,
}

impl OtReceiver {
    pub fn from_base(keys: Vec<(Key, Key)>) -> Result<Self> {
        if keys.len() != BASE_OTS {
            return Err(Error::Protocol("wrong number of base keys".into()));
        }
        let streams = keys
            .into_iter()
            .map(|(k0, k1)| (ChaCha20Rng::from_seed(k0), ChaCha20Rng::from_seed(k1)))
            .collect();
        Ok(Self { streams, counter: 0 })
    }

    pub fn request(&mut self, choices: &[bool]) -> (ExtRequest, PendingBatch) {
        let m = padded_len(choices.len());
        let mut r = vec![0u8; m / 8];
        for (j, &c) in choices.iter().enumerate() {
            if c {
                r[j / 8] |= 1 << (j % 8);
            }
        }
        let mut t_cols = Vec::with_capacity(BASE_OTS);
        let mut u_cols = Vec::with_capacity(BASE_OTS);
        for (s0, s1) in &mut self.streams {
            let t = draw(s0, m / 8);
            let g1 = draw(s1, m / 8);
            let u = t.iter().zip(&g1).zip(&r).map(|((a, b), c)| a ^ b ^ c).collect();
            t_cols.push(t);
            u_cols.push(u);
        }
        let start = self.counter;
        self.counter += m as u64;
        let rows = transpose(&t_cols, choices.len());
        (
            ExtRequest {
                count: choices.len(),
                columns: u_cols,
            },
            PendingBatch {
                start,
                choices: choices.to_vec(),
                rows,
            },
        )
    }

    pub fn receive(&self, batch: PendingBatch, response: &ExtResponse) -> Result<Vec<Label>> {
        if response.pairs.len() != batch.choices.len() {
            return Err(Error::Protocol(format!(
                "oblivious transfer length mismatch: asked {}, got {}",
                batch.choices.len(),
                response.pairs.len()
            )));
        }
        Ok(batch
            .choices
            .iter()
            .zip(&batch.rows)
            .zip(&response.pairs)
            .enumerate()
            .map(|(j, ((&c, &t), &(y0, y1)))| {
                let y = if c { y1 } else { y0 };
                y ^ row_hash(batch.start + j as u64, t)
            })
            .collect())
    }
}

/// Extension sender (the circuit generator).
pub struct OtSender {
    s: u128,
    streams: Vec<ChaCha20Rng>,
    counter: u64,
}

impl OtSender {
    /// Picks the secret column mask; returns it as base-phase choice bits.
    pub fn choose_mask<R: RngCore + CryptoRng>(rng: &mut R) -> Vec<bool> {
        (0..BASE_OTS).map(|_| rng.gen()).collect()
    }

    pub fn from_base(mask: &[bool], keys: Vec<Key>) -> Result<Self> {
        if mask.len() != BASE_OTS || keys.len() != BASE_OTS {
            return Err(Error::Protocol("wrong number of base keys".into()));
        }
        let s = mask
            .iter()
            .enumerate()
            .fold(0u128, |acc, (i, &b)| if b { acc | 1u128 << i } else { acc });
        let streams = keys.into_iter().map(ChaCha20Rng::from_seed).collect();
        Ok(Self { s, streams, counter: 0 })
    }

    pub fn respond(&mut self, request: &ExtRequest, pairs: &[(Label, Label)]) -> Result<ExtResponse> {
        if request.count != pairs.len() {
            return Err(Error::Protocol(format!(
                "oblivious transfer length mismatch: {} choices for {} label pairs",
                request.count,
                pairs.len()
            )));
        }
        let m = padded_len(request.count);
        if request.columns.len() != BASE_OTS || request.columns.iter().any(|c| c.len() != m / 8) {
            return Err(Error::Protocol("malformed oblivious transfer request".into()));
        }
        let q_cols: Vec<Vec<u8>> = self
            .streams
            .iter_mut()
            .zip(&request.columns)
            .enumerate()
            .map(|(i, (stream, u))| {
                let g = draw(stream, m / 8);
                if (self.s >> i) & 1 == 1 {
                    g.iter().zip(u).map(|(a, b)| a ^ b).collect()
                } else {
                    g
                }
            })
            .collect();
        let start = self.counter;
        self.counter += m as u64;
        let rows = transpose(&q_cols, request.count);
        let pairs = rows
            .iter()
            .zip(pairs)
            .enumerate()
            .map(|(j, (&q, &(x0, x1)))| {
                let idx = start + j as u64;
                (x0 ^ row_hash(idx, q), x1 ^ row_hash(idx, q ^ self.s))
            })
            .collect();
        Ok(ExtResponse { pairs })
    }
}

/// Runs base setup for one link with both sides in memory.
pub fn setup_pair<R: RngCore + CryptoRng>(rng: &mut R) -> Result<(OtSender, OtReceiver)> {
    let (base_sender, a_msg) = BaseOtSender::new(rng);
    let mask = OtSender::choose_mask(rng);
    let (reply, keys) = base_ot_receive(&a_msg, &mask, rng)?;
    let receiver = OtReceiver::from_base(base_sender.finish(&reply)?)?;
    let sender = OtSender::from_base(&mask, keys)?;
    Ok((sender, receiver))
}

/// One batch of label transfers with both parties in memory.
pub fn ot_exchange(
    sender: &mut OtSender,
    receiver: &mut OtReceiver,
    pairs: &[(Label, Label)],
    choices: &[bool],
) -> Result<Vec<Label>> {
    let (request, batch) = receiver.request(choices);
    let response = sender.respond(&request, pairs)?;
    receiver.receive(batch, &response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{build_comparator, garble};

    fn setup(seed: u64) -> (OtSender, OtReceiver, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (s, r) = setup_pair(&mut rng).unwrap();
        (s, r, rng)
    }

    fn random_pairs(rng: &mut ChaCha20Rng, n: usize) -> Vec<(Label, Label)> {
        (0..n).map(|_| (rng.gen(), rng.gen())).collect()
    }

    #[test]
    fn base_keys_agree_with_choices() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (sender, a_msg) = BaseOtSender::new(&mut rng);
        let choices = OtSender::choose_mask(&mut rng);
        let (reply, keys) = base_ot_receive(&a_msg, &choices, &mut rng).unwrap();
        let pairs = sender.finish(&reply).unwrap();
        for ((k0, k1), (&c, k)) in pairs.iter().zip(choices.iter().zip(&keys)) {
            assert_eq!(k, if c { k1 } else { k0 });
            assert_ne!(k, if c { k0 } else { k1 });
        }
    }

    #[test]
    fn all_zero_choices_give_zero_labels() {
        let (mut s, mut r, mut rng) = setup(2);
        let pairs = random_pairs(&mut rng, 16);
        let got = ot_exchange(&mut s, &mut r, &pairs, &[false; 16]).unwrap();
        assert_eq!(got, pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    }

    #[test]
    fn random_choices_select_matching_labels() {
        let (mut s, mut r, mut rng) = setup(3);
        for batch in 0..5 {
            let n = 16 + batch * 3;
            let pairs = random_pairs(&mut rng, n);
            let choices: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            let got = ot_exchange(&mut s, &mut r, &pairs, &choices).unwrap();
            for ((p, c), g) in pairs.iter().zip(&choices).zip(&got) {
                assert_eq!(*g, if *c { p.1 } else { p.0 });
            }
        }
    }

    #[test]
    fn length_mismatch_is_protocol_error() {
        let (mut s, mut r, mut rng) = setup(4);
        let pairs = random_pairs(&mut rng, 8);
        let (request, _) = r.request(&[true; 9]);
        assert!(matches!(s.respond(&request, &pairs), Err(Error::Protocol(_))));
    }

    #[test]
    fn malformed_point_is_protocol_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let choices = OtSender::choose_mask(&mut rng);
        assert!(matches!(base_ot_receive(&[0xff; 32], &choices, &mut rng), Err(Error::Protocol(_))));
        let (sender, _) = BaseOtSender::new(&mut rng);
        assert!(matches!(sender.finish(&vec![[0xff; 32]; BASE_OTS]), Err(Error::Protocol(_))));
    }

    #[test]
    fn unreceived_labels_do_not_decode() {
        let (mut s, mut r, mut rng) = setup(6);
        let c = build_comparator(4).unwrap();
        let (gc, enc) = garble(&c, &mut rng);
        let choices = vec![true, false, true, false, false, true];
        let got = ot_exchange(&mut s, &mut r, &enc.evaluator_pairs(), &choices).unwrap();
        let gl = enc.garbler_labels(&[false; 6]).unwrap();
        let expected = crate::circuits::eval_plain(&c, &[false; 6], &choices).unwrap();
        assert_eq!(gc.clone().evaluate_and_decode(&c, &gl, &got).unwrap(), expected);

        // Labels from an unrelated garbling stand in for labels never sent.
        let (_, other) = garble(&c, &mut rng);
        let foreign = other.evaluator_labels(&choices).unwrap();
        let (labels, decoding) = gc.evaluate(&c, &gl, &foreign).unwrap();
        assert!(matches!(decoding.decode(&labels), Err(Error::DecodeFailed)));
    }
}
