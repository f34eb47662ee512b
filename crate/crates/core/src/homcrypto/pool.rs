use std::collections::VecDeque;
use std::sync::Mutex;

use num_bigint::BigUint;
use rand::{CryptoRng, RngCore};

use super::{KeyId, PrivateKey, PublicKey};
use crate::error::{Error, Result};

/// Queue of precomputed nonce powers `r^N mod N^2` for one public key.
///
/// Every value is handed out at most once. Consumption is serialized by an
/// internal lock so a pool can be shared between threads.
#[derive(Debug)]
pub struct RandomnessPool {
    key_id: KeyId,
    queue: Mutex<VecDeque<BigUint>>,
    allow_fallback: bool,
}

impl RandomnessPool {
    pub fn new(pk: &PublicKey) -> Self {
        Self {
            key_id: pk.key_id(),
            queue: Mutex::new(VecDeque::new()),
            allow_fallback: true,
        }
    }

    /// A pool that errors instead of computing nonces on demand once empty.
    pub fn strict(pk: &PublicKey) -> Self {
        Self {
            allow_fallback: false,
            ..Self::new(pk)
        }
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds `count` values computed from the public key alone.
    pub fn fill<R: RngCore + CryptoRng>(&self, pk: &PublicKey, count: usize, rng: &mut R) -> Result<()> {
        self.check(pk)?;
        let fresh: Vec<BigUint> = (0..count).map(|_| pk.fresh_nonce_power(rng)).collect();
        self.lock().extend(fresh);
        Ok(())
    }

    /// Adds `count` values using the key holder's factorization shortcut.
    pub fn fill_with_private<R: RngCore + CryptoRng>(
        &self,
        sk: &PrivateKey,
        count: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.check(sk.public_key())?;
        let fresh: Vec<BigUint> = (0..count).map(|_| sk.fast_nonce_power(rng)).collect();
        self.lock().extend(fresh);
        Ok(())
    }

    pub fn take(&self) -> Option<BigUint> {
        self.lock().pop_front()
    }

    pub(super) fn take_or_generate<R: RngCore + CryptoRng>(&self, pk: &PublicKey, rng: &mut R) -> Result<BigUint> {
        self.check(pk)?;
        match self.take() {
            Some(rn) => Ok(rn),
            None if self.allow_fallback => Ok(pk.fresh_nonce_power(rng)),
            None => Err(Error::Config("randomness pool exhausted".into())),
        }
    }

    fn check(&self, pk: &PublicKey) -> Result<()> {
        if pk.key_id() != self.key_id {
            return Err(Error::KeyMismatch);
        }
        Ok(())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, VecDeque<BigUint>> {
        self.queue.lock().unwrap_or_else(|e| e.into_inner())
    }
}
