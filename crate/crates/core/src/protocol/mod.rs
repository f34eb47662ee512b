//! Role engines for the storage server (CSP), the data owner (DO) and the
//! data analyst (DA), plus a harness that runs all three in one process.
//!
//! Every message travels on one of three framed links: CSP-DO, CSP-DA and
//! DO-DA. Sessions are opened by the analyst and identified by a random
//! 16-byte id shared by all three parties.

mod analyst;
mod cluster;
mod csp;
mod messages;
mod metrics;
mod owner;
mod round;

pub use analyst::{Analyst, AnalystConfig, EncryptOutcome};
pub use cluster::{Cluster, ClusterSpec, ClusterTranscripts, TransportKind};
pub use csp::{serve_csp, Acceptor, CspServer, NodeTamper, RoundBits, SessionHook, SessionOutcome, SessionRecord};
pub use metrics::{Clock, FakeClock, Metrics, MonotonicClock, Phase, PhaseSample};
pub use owner::{serve_owner, OwnerDaemon, OwnerStates};
pub use round::{combine_shares, Shares};

use num_bigint::BigUint;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::homcrypto::PublicKey;
use crate::integrity::{IntegrityMode, SUBGROUP_BITS};
use crate::ope::{Mode, TableParams};

/// Parameters every party must agree on; their digest is checked during
/// the link handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolParams {
    pub table: TableParams,
    /// Statistical blinding bits.
    pub k: u32,
    pub integrity: IntegrityMode,
    /// Analysts store an opaque identifier instead of uploading a ciphertext.
    pub uid: bool,
}

impl ProtocolParams {
    pub fn new(table: TableParams, k: u32, integrity: IntegrityMode, uid: bool) -> Result<Self> {
        if k == 0 || k > 256 {
            return Err(Error::Config(format!("statistical parameter k={k} outside [1, 256]")));
        }
        if uid && table.mode == Mode::FrequencyHiding {
            return Err(Error::Config("identifier uploads are not available in frequency-hiding mode".into()));
        }
        Ok(Self {
            table,
            k,
            integrity,
            uid,
        })
    }

    pub fn mode(&self) -> Mode {
        self.table.mode
    }

    /// Comparator width: blinded values are below `2^(l+k) + 2^l`.
    pub fn width(&self) -> usize {
        (self.table.l + self.k + 1) as usize
    }

    /// Blinding offsets are drawn below `2^(l+k)`.
    pub fn offset_bits(&self) -> u64 {
        (self.table.l + self.k) as u64
    }

    /// Exclusive bound on an honest blinded node value.
    pub fn blinded_limit(&self) -> BigUint {
        (BigUint::from(1u8) << self.offset_bits()) + (BigUint::from(1u8) << self.table.l)
    }

    /// Bits of the Pedersen blinding offset `r'`.
    pub fn pedersen_offset_bits(&self) -> u64 {
        SUBGROUP_BITS as u64 + self.k as u64
    }

    /// The owner key must leave room for blinded sums without wrapping.
    pub fn check_key(&self, pk: &PublicKey) -> Result<()> {
        let mut need = self.offset_bits() + 2;
        if self.integrity == IntegrityMode::Pedersen {
            need = need.max(self.pedersen_offset_bits() + 2);
        }
        if (pk.key_bits() as u64) <= need {
            return Err(Error::Config(format!(
                "{}-bit key too small for l={} k={} (need more than {need} bits)",
                pk.key_bits(),
                self.table.l,
                self.k
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"oope-params-v1");
        h.update(self.table.l.to_be_bytes());
        h.update(self.k.to_be_bytes());
        h.update(self.table.log2m.to_be_bytes());
        h.update(self.table.max_order.to_be_bytes());
        h.update([self.table.mode.code(), self.integrity.code(), self.uid as u8]);
        h.finalize().into()
    }
}
