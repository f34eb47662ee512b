//! Node authentication against a storage server that substitutes
//! ciphertexts: discrete-log MACs and Pedersen commitments in a prime-order
//! subgroup whose parameters the server never sees.

use std::fmt;
use std::str::FromStr;

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::homcrypto::{random_prime, HomCiphertext};

pub const PRODUCTION_MODULUS_BITS: usize = 2048;
pub const SUBGROUP_BITS: usize = 256;
const MIN_TEST_MODULUS_BITS: usize = SUBGROUP_BITS + 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum IntegrityMode {
    #[default]
    Off,
    DlMac,
    Pedersen,
}

impl IntegrityMode {
    pub fn code(self) -> u8 {
        match self {
            IntegrityMode::Off => 0,
            IntegrityMode::DlMac => 1,
            IntegrityMode::Pedersen => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(IntegrityMode::Off),
            1 => Ok(IntegrityMode::DlMac),
            2 => Ok(IntegrityMode::Pedersen),
            _ => Err(Error::Corrupt(format!("unknown integrity mode {code}"))),
        }
    }
}

impl fmt::Display for IntegrityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntegrityMode::Off => "off",
            IntegrityMode::DlMac => "dlmac",
            IntegrityMode::Pedersen => "pedersen",
        })
    }
}

impl FromStr for IntegrityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(IntegrityMode::Off),
            "dlmac" => Ok(IntegrityMode::DlMac),
            "pedersen" => Ok(IntegrityMode::Pedersen),
            _ => Err(Error::Usage(format!("unknown integrity mode {s:?} (off|dlmac|pedersen)"))),
        }
    }
}

/// Group parameters shared by the owner and the analyst.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacParams {
    pub p: BigUint,
    pub q: BigUint,
    pub g: BigUint,
    pub h: BigUint,
}

impl fmt::Debug for MacParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacParams({} bit modulus)", self.p.bits())
    }
}

impl MacParams {
    pub fn generate<R: RngCore + CryptoRng>(p_bits: usize, rng: &mut R) -> Result<Self> {
        if p_bits < PRODUCTION_MODULUS_BITS {
            return Err(Error::Config(format!(
                "integrity modulus must have at least {PRODUCTION_MODULUS_BITS} bits"
            )));
        }
        Self::generate_for_testing(p_bits, rng)
    }

    /// Like [`MacParams::generate`] but allows small moduli.
    pub fn generate_for_testing<R: RngCore + CryptoRng>(p_bits: usize, rng: &mut R) -> Result<Self> {
        if p_bits < MIN_TEST_MODULUS_BITS {
            return Err(Error::Config(format!("integrity modulus of {p_bits} bits is too small")));
        }
        let q = random_prime(SUBGROUP_BITS, rng)?;
        let k_bits = (p_bits - SUBGROUP_BITS) as u64;
        let mut attempts = 0usize;
        let p = loop {
            attempts += 1;
            if attempts > 1 << 20 {
                return Err(Error::PrimeGeneration(attempts));
            }
            let mut k = rng.gen_biguint(k_bits);
            k.set_bit(k_bits - 1, true);
            k.set_bit(0, false);
            let p = &k * &q + 1u32;
            if p.bits() as usize == p_bits && glass_pumpkin::prime::check_with(&p, rng) {
                break p;
            }
        };
        let g = hash_to_group(b"generator-g", &p, &q);
        let h = hash_to_group(b"generator-h", &p, &q);
        Ok(Self { p, q, g, h })
    }

    /// Checks the subgroup structure and generator orders.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid integrity parameters: {m}")));
        if !((&self.p - 1u32) % &self.q).is_zero() {
            return bad("q does not divide p - 1");
        }
        for (name, x) in [("g", &self.g), ("h", &self.h)] {
            if x <= &BigUint::one() || x >= &self.p {
                return bad(name);
            }
            if !x.modpow(&self.q, &self.p).is_one() {
                return bad(name);
            }
        }
        Ok(())
    }

    pub fn byte_width(&self) -> usize {
        (self.p.bits() as usize).div_ceil(8)
    }

    fn pow_g(&self, e: &BigUint) -> BigUint {
        self.g.modpow(e, &self.p)
    }

    fn pow_h(&self, e: &BigUint) -> BigUint {
        self.h.modpow(e, &self.p)
    }

    /// Uniform exponent for Pedersen blinding.
    pub fn random_exponent<R: RngCore + CryptoRng>(&self, rng: &mut R) -> BigUint {
        rng.gen_biguint_below(&self.q)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let params: MacParams = serde_json::from_str(s)?;
        params.validate()?;
        Ok(params)
    }
}

/// Maps a label into the order-q subgroup; nobody knows discrete logs
/// between two such images.
fn hash_to_group(label: &[u8], p: &BigUint, q: &BigUint) -> BigUint {
    let cofactor = (p - 1u32) / q;
    let width = (p.bits() as usize).div_ceil(8) + 16;
    for counter in 0u32.. {
        let mut bytes = Vec::with_capacity(width + 32);
        let mut block = 0u32;
        while bytes.len() < width {
            let mut hasher = Sha256::new();
            hasher.update(label);
            hasher.update(counter.to_be_bytes());
            hasher.update(block.to_be_bytes());
            bytes.extend_from_slice(&hasher.finalize());
            block += 1;
        }
        let x = BigUint::from_bytes_be(&bytes[..width]) % p;
        let y = x.modpow(&cofactor, p);
        if y > BigUint::one() {
            return y;
        }
    }
    unreachable!("counter space exhausted")
}

/// Tag stored with a node when integrity checking is on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeTag {
    /// `g^x mod p`.
    DlMac(BigUint),
    /// `g^x h^a mod p` together with `[[a]]`.
    Pedersen { commitment: BigUint, blinding: HomCiphertext },
}

impl NodeTag {
    pub fn mode(&self) -> IntegrityMode {
        match self {
            NodeTag::DlMac(_) => IntegrityMode::DlMac,
            NodeTag::Pedersen { .. } => IntegrityMode::Pedersen,
        }
    }
}

pub fn dl_mac_make(x: &BigUint, params: &MacParams) -> BigUint {
    params.pow_g(x)
}

/// Owner's answer for a blinded node: `g^(x+r)`.
pub fn dl_response(x_plus_r: &BigUint, params: &MacParams) -> BigUint {
    params.pow_g(x_plus_r)
}

/// `mac * g^r == m (mod p)`.
pub fn dl_mac_verify(mac: &BigUint, r: &BigUint, m: &BigUint, params: &MacParams) -> bool {
    mac * params.pow_g(r) % &params.p == *m
}

pub fn ped_commit_make(x: &BigUint, a: &BigUint, params: &MacParams) -> BigUint {
    params.pow_g(x) * params.pow_h(a) % &params.p
}

/// Owner's answer for a blinded node: `g^(x+r) h^(a+r')`.
pub fn ped_response(x_plus_r: &BigUint, a_plus_r2: &BigUint, params: &MacParams) -> BigUint {
    ped_commit_make(x_plus_r, a_plus_r2, params)
}

/// `commitment * g^r * h^r' == m (mod p)`.
pub fn ped_verify(commitment: &BigUint, r: &BigUint, r2: &BigUint, m: &BigUint, params: &MacParams) -> bool {
    commitment * params.pow_g(r) % &params.p * params.pow_h(r2) % &params.p == *m
}

/// Returns the parameters or a usage error for roles that must not hold them.
pub fn require(params: Option<&MacParams>) -> Result<&MacParams> {
    params.ok_or_else(|| Error::Usage("integrity parameters are not available to this role".into()))
}
