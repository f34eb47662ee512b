//! Mutable order-preserving encoding state: the ordered table of
//! `(ciphertext, order)` pairs, the search tree over it, the owner's
//! plaintext map, order assignment and rebalancing.

mod init;
mod owner;
mod persist;
mod table;
mod tree;

pub use init::{init_state, plan_orders, InitOptions, InitOutput, OrderPlan, TreeShape};
pub use owner::OwnerState;
pub use persist::{read_table, write_synthetic_table, write_table, TableSizeReport, TABLE_HEADER_LEN};
pub use table::{InsertionPlan, Neighbors, OpeStore, OpeTable, StoreLayout};
pub use tree::OpeTree;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homcrypto::HomCiphertext;
use crate::integrity::NodeTag;
use crate::transport::SessionId;

/// An order value `y`. Real entries live in `[1, M-1]`; `0` and `M` are the
/// virtual bounds of an empty neighborhood.
pub type Order = u128;

/// Largest supported order-space exponent.
pub const MAX_LOG2M: u32 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// `b_g = 1` (query greater than node) goes right.
    pub fn from_greater(bit: bool) -> Self {
        if bit {
            Side::Right
        } else {
            Side::Left
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    Deterministic,
    FrequencyHiding,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Deterministic => 0,
            Mode::FrequencyHiding => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Mode::Deterministic),
            1 => Ok(Mode::FrequencyHiding),
            _ => Err(Error::Corrupt(format!("unknown mode {code}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Deterministic => "det",
            Mode::FrequencyHiding => "fh",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" => Ok(Mode::Deterministic),
            "fh" => Ok(Mode::FrequencyHiding),
            _ => Err(Error::Usage(format!("unknown mode {s:?} (det|fh)"))),
        }
    }
}

/// Shape parameters of one encoded column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableParams {
    /// Plaintext bit length.
    pub l: u32,
    /// Bits of the order space; `M < 2^log2m`.
    pub log2m: u32,
    /// Maximum order `M`.
    pub max_order: Order,
    pub mode: Mode,
}

impl TableParams {
    /// `M = 2^log2m - 1`.
    pub fn new(l: u32, log2m: u32, mode: Mode) -> Result<Self> {
        if !(2..=MAX_LOG2M).contains(&log2m) {
            return Err(Error::Config(format!("log2m must lie in [2, {MAX_LOG2M}], got {log2m}")));
        }
        Self::with_max_order(l, (1u128 << log2m) - 1, mode)
    }

    pub fn with_max_order(l: u32, max_order: Order, mode: Mode) -> Result<Self> {
        if l == 0 || l > 4096 {
            return Err(Error::Config(format!("plaintext length {l} out of range")));
        }
        if max_order < 2 || max_order >= 1u128 << MAX_LOG2M {
            return Err(Error::Config(format!("maximum order {max_order} out of range")));
        }
        Ok(Self {
            l,
            log2m: 128 - max_order.leading_zeros(),
            max_order,
            mode,
        })
    }
}

/// `y_left + ceil((y_right - y_left) / 2)`.
pub fn assign_order(y_left: Order, y_right: Order) -> Result<Order> {
    if y_left >= y_right {
        return Err(Error::Domain(format!("order interval ({y_left}, {y_right}) is empty")));
    }
    let gap = y_right - y_left;
    if gap == 1 {
        return Err(Error::GapExhausted {
            left: y_left,
            right: y_right,
        });
    }
    Ok(y_left + gap.div_ceil(2))
}

/// What a table node stores in place of the plaintext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeValue {
    Cipher(HomCiphertext),
    /// Opaque analyst-side identifier; only its owner can compare against it.
    Uid([u8; 16]),
}

impl NodeValue {
    pub fn cipher(&self) -> Option<&HomCiphertext> {
        match self {
            NodeValue::Cipher(c) => Some(c),
            NodeValue::Uid(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Owner,
    /// Inserted by an analyst session; removable by cleanup.
    Analyst(SessionId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpeEntry {
    pub value: NodeValue,
    pub order: Order,
    pub fh_min: Option<HomCiphertext>,
    pub fh_max: Option<HomCiphertext>,
    pub tag: Option<NodeTag>,
    pub origin: Origin,
}

impl OpeEntry {
    pub fn owner(cipher: HomCiphertext, order: Order) -> Self {
        Self {
            value: NodeValue::Cipher(cipher),
            order,
            fh_min: None,
            fh_max: None,
            tag: None,
            origin: Origin::Owner,
        }
    }
}

/// Old-to-new order mapping produced by a rebalance, sorted by old order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Remap {
    pairs: Vec<(Order, Order)>,
}

impl Remap {
    pub fn from_pairs(mut pairs: Vec<(Order, Order)>) -> Self {
        pairs.sort_unstable();
        Self { pairs }
    }

    pub fn pairs(&self) -> &[(Order, Order)] {
        &self.pairs
    }

    pub fn get(&self, old: Order) -> Option<Order> {
        self.pairs
            .binary_search_by_key(&old, |p| p.0)
            .ok()
            .map(|i| self.pairs[i].1)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Uniformly spread orders for `n` ranked entries: rank `i` (1-based) gets
/// `ceil(i * M / (n + 1))`.
pub fn spread_orders(n: usize, max_order: Order) -> Result<Vec<Order>> {
    if n as u128 >= max_order.saturating_sub(1) {
        return Err(Error::Capacity {
            entries: n,
            max_order,
        });
    }
    let d = n as u128 + 1;
    let (q, rem) = (max_order / d, max_order % d);
    Ok((1..=n as u128).map(|i| i * q + (i * rem).div_ceil(d)).collect())
}
