use std::collections::BTreeMap;
use std::io::{Read, Write};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use super::{Order, Remap};
use crate::error::{Error, Result};

/// The owner's plaintext view of one column: order to plaintext.
///
/// Only owner-inserted entries are tracked; analyst inserts never reach the
/// owner in the clear.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OwnerState {
    pairs: BTreeMap<Order, BigUint>,
}

#[derive(Serialize, Deserialize)]
struct StoredPair {
    order: String,
    value: String,
}

impl OwnerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, order: Order, value: BigUint) -> Result<()> {
        if self.pairs.contains_key(&order) {
            return Err(Error::Integrity(format!("owner already holds order {order}")));
        }
        self.pairs.insert(order, value);
        Ok(())
    }

    pub fn get(&self, order: Order) -> Option<&BigUint> {
        self.pairs.get(&order)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Order, &BigUint)> {
        self.pairs.iter().map(|(&o, v)| (o, v))
    }

    /// Orders currently assigned to `value`, ascending.
    pub fn orders_of(&self, value: &BigUint) -> Vec<Order> {
        self.pairs.iter().filter(|(_, v)| *v == value).map(|(&o, _)| o).collect()
    }

    /// Moves every tracked order through a rebalance remap. Orders absent
    /// from the remap are an error: the owner would otherwise go stale.
    pub fn apply_remap(&mut self, remap: &Remap) -> Result<()> {
        let mut next = BTreeMap::new();
        for (o, v) in std::mem::take(&mut self.pairs) {
            let new = remap
                .get(o)
                .ok_or_else(|| Error::Integrity(format!("remap misses owner order {o}")))?;
            next.insert(new, v);
        }
        self.pairs = next;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        let rows: Vec<StoredPair> = self
            .pairs
            .iter()
            .map(|(o, v)| StoredPair {
                order: o.to_string(),
                value: v.to_str_radix(10),
            })
            .collect();
        serde_json::to_writer(w, &rows)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let rows: Vec<StoredPair> = serde_json::from_reader(r)?;
        let mut state = OwnerState::new();
        for row in rows {
            let order: Order = row
                .order
                .parse()
                .map_err(|_| Error::Corrupt(format!("bad order {:?}", row.order)))?;
            let value = BigUint::parse_bytes(row.value.as_bytes(), 10)
                .ok_or_else(|| Error::Corrupt(format!("bad plaintext {:?}", row.value)))?;
            state.insert(order, value)?;
        }
        Ok(state)
    }
}
