//! Paillier encryption with the generator fixed to `g = 1 + N`.
//!
//! Encryption is `(1 + mN) * r^N mod N^2`, so the only exponentiation is the
//! nonce power `r^N`, which can be precomputed into a [`RandomnessPool`].
//! Decryption goes through the Chinese remainder theorem over `P^2` and `Q^2`;
//! [`PrivateKey::decrypt_direct`] keeps the single-exponentiation formula
//! around as a reference.

mod pool;

pub use pool::RandomnessPool;

use std::fmt;
use std::io::{Read, Write};

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Modulus sizes accepted by [`keygen`].
pub const PRODUCTION_KEY_BITS: [usize; 4] = [1024, 2048, 3072, 4096];

const MAX_PRIME_ATTEMPTS: usize = 64;
const MIN_TEST_KEY_BITS: usize = 32;

/// Content hash of a public modulus.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyId(pub [u8; 32]);

impl KeyId {
    fn of_modulus(n: &BigUint) -> Self {
        let digest = Sha256::digest(n.to_bytes_be());
        KeyId(digest.into())
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({:02x}{:02x}{:02x}{:02x}..)", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKey {
    n: BigUint,
    #[serde(skip_serializing)]
    #[serde(default)]
    n_squared: BigUint,
    key_bits: usize,
    #[serde(skip_serializing)]
    #[serde(default = "empty_key_id")]
    key_id: KeyId,
}

fn empty_key_id() -> KeyId {
    KeyId([0; 32])
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("key_bits", &self.key_bits)
            .field("key_id", &self.key_id)
            .finish()
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct PrivateKey {
    p: BigUint,
    q: BigUint,
    #[serde(skip)]
    cache: Option<CrtCache>,
    public: PublicKey,
}

#[derive(Clone)]
struct CrtCache {
    lambda: BigUint,
    mu: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    p_minus_one: BigUint,
    q_minus_one: BigUint,
    h_p: BigUint,
    h_q: BigUint,
    p_inv_q: BigUint,
    p_sq_inv_q_sq: BigUint,
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrivateKey").field("public", &self.public).finish_non_exhaustive()
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct HomCiphertext {
    value: BigUint,
    key_id: KeyId,
}

impl fmt::Debug for HomCiphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HomCiphertext({} bits, {:?})", self.value.bits(), self.key_id)
    }
}

/// Generates a key pair with a production-size modulus.
pub fn keygen<R: RngCore + CryptoRng>(key_bits: usize, rng: &mut R) -> Result<(PublicKey, PrivateKey)> {
    if !PRODUCTION_KEY_BITS.contains(&key_bits) {
        return Err(Error::Config(format!(
            "key size {key_bits} not in {PRODUCTION_KEY_BITS:?}; use keygen_for_testing for small keys"
        )));
    }
    generate(key_bits, rng)
}

/// Like [`keygen`] but accepts any even size of at least 32 bits.
///
/// Small moduli are only meant for tests and benchmarks.
pub fn keygen_for_testing<R: RngCore + CryptoRng>(
    key_bits: usize,
    rng: &mut R,
) -> Result<(PublicKey, PrivateKey)> {
    if key_bits < MIN_TEST_KEY_BITS || key_bits % 2 != 0 {
        return Err(Error::Config(format!("unsupported key size {key_bits}")));
    }
    generate(key_bits, rng)
}

fn generate<R: RngCore + CryptoRng>(key_bits: usize, rng: &mut R) -> Result<(PublicKey, PrivateKey)> {
    let half = key_bits / 2;
    for _ in 0..MAX_PRIME_ATTEMPTS {
        let p = random_prime(half, rng)?;
        let q = random_prime(half, rng)?;
        if p == q || p.bits() != q.bits() {
            continue;
        }
        let n = &p * &q;
        if n.bits() as usize != key_bits {
            continue;
        }
        // gcd(N, phi(N)) = 1 holds for equal-length primes, but check anyway.
        let phi = (&p - 1u32) * (&q - 1u32);
        if !n.gcd(&phi).is_one() {
            continue;
        }
        let sk = PrivateKey::from_primes(p, q)?;
        return Ok((sk.public.clone(), sk));
    }
    Err(Error::PrimeGeneration(MAX_PRIME_ATTEMPTS))
}

/// Probable prime of exactly `bits` bits (error probability below 2^-80).
pub fn random_prime<R: RngCore + CryptoRng>(bits: usize, rng: &mut R) -> Result<BigUint> {
    const LIBRARY_MIN_BITS: usize = 128;
    if bits >= LIBRARY_MIN_BITS {
        return glass_pumpkin::prime::from_rng(bits, rng).map_err(|_| Error::PrimeGeneration(1));
    }
    if bits < 8 {
        return Err(Error::Config(format!("prime size {bits} too small")));
    }
    for _ in 0..(1 << 16) {
        let mut candidate = rng.gen_biguint(bits as u64);
        candidate.set_bit(bits as u64 - 1, true);
        candidate.set_bit(0, true);
        if glass_pumpkin::prime::check_with(&candidate, rng) {
            return Ok(candidate);
        }
    }
    Err(Error::PrimeGeneration(1 << 16))
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self> {
        if n.is_even() || n < BigUint::from(15u32) {
            return Err(Error::Domain("modulus must be odd and composite".into()));
        }
        let key_bits = n.bits() as usize;
        Ok(Self {
            n_squared: &n * &n,
            key_id: KeyId::of_modulus(&n),
            n,
            key_bits,
        })
    }

    /// Recomputes the cached fields after deserialization.
    fn restore(&mut self) {
        self.n_squared = &self.n * &self.n;
        self.key_id = KeyId::of_modulus(&self.n);
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn key_bits(&self) -> usize {
        self.key_bits
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    /// Byte width of a serialized ciphertext residue.
    pub fn ciphertext_width(&self) -> usize {
        (2 * self.key_bits).div_ceil(8)
    }

    /// Samples `r` uniformly from `Z*_N`.
    pub fn random_nonce<R: RngCore + CryptoRng>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_range(&BigUint::one(), &self.n);
            if r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// `r^N mod N^2`.
    pub fn nonce_power(&self, r: &BigUint) -> BigUint {
        r.modpow(&self.n, &self.n_squared)
    }

    pub fn fresh_nonce_power<R: RngCore + CryptoRng>(&self, rng: &mut R) -> BigUint {
        let r = self.random_nonce(rng);
        self.nonce_power(&r)
    }

    /// `(1 + mN) * rn mod N^2` where `rn = r^N mod N^2`.
    pub fn encrypt_with_nonce_power(&self, m: &BigUint, rn: &BigUint) -> Result<HomCiphertext> {
        self.check_plaintext(m)?;
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        Ok(HomCiphertext {
            value: gm * rn % &self.n_squared,
            key_id: self.key_id,
        })
    }

    /// Encrypts `m`, drawing the nonce power from `pool` when one is given.
    ///
    /// An empty pool falls back to computing a fresh nonce unless the pool
    /// was built with fallback disabled.
    pub fn encrypt<R: RngCore + CryptoRng>(
        &self,
        m: &BigUint,
        pool: Option<&RandomnessPool>,
        rng: &mut R,
    ) -> Result<HomCiphertext> {
        self.check_plaintext(m)?;
        let rn = match pool {
            Some(pool) => pool.take_or_generate(self, rng)?,
            None => self.fresh_nonce_power(rng),
        };
        self.encrypt_with_nonce_power(m, &rn)
    }

    pub fn hom_add(&self, a: &HomCiphertext, b: &HomCiphertext) -> Result<HomCiphertext> {
        self.check_key(a)?;
        self.check_key(b)?;
        Ok(HomCiphertext {
            value: &a.value * &b.value % &self.n_squared,
            key_id: self.key_id,
        })
    }

    /// Encryption of `m1 - m2 mod N`.
    pub fn hom_sub(&self, a: &HomCiphertext, b: &HomCiphertext) -> Result<HomCiphertext> {
        self.check_key(a)?;
        self.check_key(b)?;
        let inv = b
            .value
            .modinv(&self.n_squared)
            .ok_or_else(|| Error::Domain("ciphertext not invertible mod N^2".into()))?;
        Ok(HomCiphertext {
            value: &a.value * inv % &self.n_squared,
            key_id: self.key_id,
        })
    }

    /// Encryption of `m * s mod N`, `0 < s < N`.
    pub fn hom_scale(&self, c: &HomCiphertext, s: &BigUint) -> Result<HomCiphertext> {
        self.check_key(c)?;
        if s.is_zero() || s >= &self.n {
            return Err(Error::Domain("scalar must lie in (0, N)".into()));
        }
        Ok(HomCiphertext {
            value: c.value.modpow(s, &self.n_squared),
            key_id: self.key_id,
        })
    }

    /// Multiplies in a fresh nonce power; the plaintext is unchanged.
    pub fn rerandomize<R: RngCore + CryptoRng>(
        &self,
        c: &HomCiphertext,
        pool: Option<&RandomnessPool>,
        rng: &mut R,
    ) -> Result<HomCiphertext> {
        self.check_key(c)?;
        let rn = match pool {
            Some(pool) => pool.take_or_generate(self, rng)?,
            None => self.fresh_nonce_power(rng),
        };
        Ok(HomCiphertext {
            value: &c.value * rn % &self.n_squared,
            key_id: self.key_id,
        })
    }

    pub fn check_key(&self, c: &HomCiphertext) -> Result<()> {
        if c.key_id != self.key_id {
            return Err(Error::KeyMismatch);
        }
        Ok(())
    }

    fn check_plaintext(&self, m: &BigUint) -> Result<()> {
        if m >= &self.n {
            return Err(Error::Domain("plaintext must be smaller than N".into()));
        }
        Ok(())
    }

    /// Wraps a raw residue as a ciphertext under this key.
    pub fn ciphertext_from_residue(&self, value: BigUint) -> Result<HomCiphertext> {
        if value >= self.n_squared {
            return Err(Error::Domain("residue must be smaller than N^2".into()));
        }
        Ok(HomCiphertext {
            value,
            key_id: self.key_id,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut pk: PublicKey = serde_json::from_str(s)?;
        pk.restore();
        Ok(pk)
    }
}

impl PrivateKey {
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self> {
        if p == q {
            return Err(Error::Domain("P and Q must differ".into()));
        }
        let public = PublicKey::from_modulus(&p * &q)?;
        let mut sk = Self {
            p,
            q,
            cache: None,
            public,
        };
        sk.cache = Some(sk.precompute()?);
        Ok(sk)
    }

    fn precompute(&self) -> Result<CrtCache> {
        let n = &self.public.n;
        let n_sq = &self.public.n_squared;
        let p_minus_one = &self.p - 1u32;
        let q_minus_one = &self.q - 1u32;
        let lambda = p_minus_one.lcm(&q_minus_one);
        let g = BigUint::one() + n;
        let not_invertible = || Error::Domain("degenerate key".into());

        let l_n = (g.modpow(&lambda, n_sq) - 1u32) / n;
        let mu = l_n.modinv(n).ok_or_else(not_invertible)?;

        let p_squared = &self.p * &self.p;
        let q_squared = &self.q * &self.q;
        let l_p = (g.modpow(&p_minus_one, &p_squared) - 1u32) / &self.p;
        let h_p = l_p.modinv(&self.p).ok_or_else(not_invertible)?;
        let l_q = (g.modpow(&q_minus_one, &q_squared) - 1u32) / &self.q;
        let h_q = l_q.modinv(&self.q).ok_or_else(not_invertible)?;
        let p_inv_q = self.p.modinv(&self.q).ok_or_else(not_invertible)?;
        let p_sq_inv_q_sq = p_squared.modinv(&q_squared).ok_or_else(not_invertible)?;

        Ok(CrtCache {
            lambda,
            mu,
            p_squared,
            q_squared,
            p_minus_one,
            q_minus_one,
            h_p,
            h_q,
            p_inv_q,
            p_sq_inv_q_sq,
        })
    }

    fn cache(&self) -> &CrtCache {
        self.cache.as_ref().expect("private key cache is built on construction")
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn primes(&self) -> (&BigUint, &BigUint) {
        (&self.p, &self.q)
    }

    pub fn lambda(&self) -> &BigUint {
        &self.cache().lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.cache().mu
    }

    /// CRT decryption.
    pub fn decrypt(&self, c: &HomCiphertext) -> Result<BigUint> {
        self.public.check_key(c)?;
        let k = self.cache();
        let m_p = {
            let u = c.value.modpow(&k.p_minus_one, &k.p_squared);
            (u - 1u32) / &self.p * &k.h_p % &self.p
        };
        let m_q = {
            let u = c.value.modpow(&k.q_minus_one, &k.q_squared);
            (u - 1u32) / &self.q * &k.h_q % &self.q
        };
        // m = m_p + p * ((m_q - m_p) * p^-1 mod q)
        let diff = (&m_q + &self.q - (&m_p % &self.q)) % &self.q;
        let t = diff * &k.p_inv_q % &self.q;
        Ok(m_p + &self.p * t)
    }

    /// Textbook decryption `L(c^lambda mod N^2) * mu mod N`.
    pub fn decrypt_direct(&self, c: &HomCiphertext) -> Result<BigUint> {
        self.public.check_key(c)?;
        let k = self.cache();
        let n = &self.public.n;
        let u = c.value.modpow(&k.lambda, &self.public.n_squared);
        Ok((u - 1u32) / n * &k.mu % n)
    }

    /// Samples a uniform N-th residue mod N^2 using the factorization.
    ///
    /// Mod `P^2` the N-th powers form the subgroup of order `P - 1`, which is
    /// exactly the image of `u -> u^P`; same for `Q`. Both exponents are half
    /// the size of `N`, so this is several times faster than `r^N mod N^2`.
    pub fn fast_nonce_power<R: RngCore + CryptoRng>(&self, rng: &mut R) -> BigUint {
        let k = self.cache();
        let sample = |prime: &BigUint, modulus: &BigUint, rng: &mut R| loop {
            let u = rng.gen_biguint_range(&BigUint::one(), modulus);
            if !(&u % prime).is_zero() {
                return u.modpow(prime, modulus);
            }
        };
        let v_p = sample(&self.p, &k.p_squared, rng);
        let v_q = sample(&self.q, &k.q_squared, rng);
        let diff = (&v_q + &k.q_squared - (&v_p % &k.q_squared)) % &k.q_squared;
        let t = diff * &k.p_sq_inv_q_sq % &k.q_squared;
        v_p + &k.p_squared * t
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sk: PrivateKey = serde_json::from_str(s)?;
        Self::from_primes(sk.p, sk.q)
    }
}

impl HomCiphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    /// Encoded size for a residue of `width` bytes.
    pub fn encoded_len(width: usize) -> usize {
        4 + width + 32
    }

    /// Length-prefixed big-endian residue padded to `width`, then the key id.
    pub fn encode_into(&self, width: usize, out: &mut Vec<u8>) {
        let bytes = self.value.to_bytes_be();
        debug_assert!(bytes.len() <= width, "residue wider than declared width");
        out.extend_from_slice(&(width as u32).to_be_bytes());
        out.resize(out.len() + width - bytes.len(), 0);
        out.extend_from_slice(&bytes);
        out.extend_from_slice(&self.key_id.0);
    }

    pub fn encode(&self, width: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(width));
        self.encode_into(width, &mut out);
        out
    }

    pub fn write_to<W: Write>(&self, width: usize, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.encode(width))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_be_bytes(len) as usize;
        if len > 1 << 16 {
            return Err(Error::Framing(format!("ciphertext length {len} too large")));
        }
        let mut value = vec![0u8; len];
        r.read_exact(&mut value)?;
        let mut key_id = [0u8; 32];
        r.read_exact(&mut key_id)?;
        Ok(Self {
            value: BigUint::from_bytes_be(&value),
            key_id: KeyId(key_id),
        })
    }

    pub fn decode(mut bytes: &[u8]) -> Result<(Self, usize)> {
        let total = bytes.len();
        let c = Self::read_from(&mut bytes)
            .map_err(|_| Error::Framing("truncated ciphertext".into()))?;
        Ok((c, total - bytes.len()))
    }
}
