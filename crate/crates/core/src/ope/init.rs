use std::collections::{BTreeMap, HashMap};
use std::ops::Bound;

use num_bigint::BigUint;
use rand::{CryptoRng, Rng, RngCore};

use super::table::StoreLayout;
use super::{assign_order, spread_orders, Mode, OpeEntry, OpeStore, OpeTable, OpeTree, Order, OwnerState, TableParams};
use crate::error::{Error, Result};
use crate::homcrypto::{HomCiphertext, PrivateKey};
use crate::integrity::{dl_mac_make, ped_commit_make, IntegrityMode, MacParams, NodeTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TreeShape {
    /// Keep the shape produced by sequential insertion.
    Insertion,
    /// Rebuild median-split after all inserts.
    #[default]
    Balanced,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InitOptions<'a> {
    pub shape: TreeShape,
    pub integrity: IntegrityMode,
    pub mac_params: Option<&'a MacParams>,
}

/// Result of running sequential insertion over plaintexts only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderPlan {
    /// One `(plaintext, order)` per table entry, in insertion order.
    pub entries: Vec<(BigUint, Order)>,
    /// For each input value, the index of its entry.
    pub input_entry: Vec<usize>,
    /// Preorder of the insertion-shaped tree.
    pub preorder: Vec<Order>,
    pub rebalances: usize,
}

struct PlanNode {
    left: Option<usize>,
    right: Option<usize>,
}

/// Sequential insertion with full plaintext knowledge. Deterministic mode
/// collapses duplicates; frequency-hiding mode sends a duplicate left or
/// right on a coin flip. An exhausted gap respaces all orders uniformly.
pub fn plan_orders<R: RngCore>(dataset: &[BigUint], params: &TableParams, rng: &mut R) -> Result<OrderPlan> {
    let m = params.max_order;
    let mut entries: Vec<(BigUint, Order)> = Vec::new();
    let mut nodes: Vec<PlanNode> = Vec::new();
    let mut by_order: BTreeMap<Order, usize> = BTreeMap::new();
    let mut rebalances = 0;
    let mut input_entry = Vec::with_capacity(dataset.len());

    for x in dataset {
        let slot = if entries.is_empty() {
            None
        } else {
            let mut cur = 0usize;
            let mut duplicate = None;
            let slot = loop {
                let go_right = match x.cmp(&entries[cur].0) {
                    std::cmp::Ordering::Less => false,
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Equal => match params.mode {
                        Mode::Deterministic => {
                            duplicate = Some(cur);
                            break None;
                        }
                        Mode::FrequencyHiding => rng.gen::<bool>(),
                    },
                };
                let next = if go_right { nodes[cur].right } else { nodes[cur].left };
                match next {
                    Some(n) => cur = n,
                    None => break Some((cur, go_right)),
                }
            };
            if let Some(existing) = duplicate {
                input_entry.push(existing);
                continue;
            }
            slot
        };

        let bounds = |by_order: &BTreeMap<Order, usize>, entries: &[(BigUint, Order)]| match slot {
            None => (0, m),
            Some((p, false)) => {
                let y = entries[p].1;
                (by_order.range(..y).next_back().map_or(0, |(&o, _)| o), y)
            }
            Some((p, true)) => {
                let y = entries[p].1;
                (
                    y,
                    by_order
                        .range((Bound::Excluded(y), Bound::Unbounded))
                        .next()
                        .map_or(m, |(&o, _)| o),
                )
            }
        };
        let (lo, hi) = bounds(&by_order, &entries);
        let order = match assign_order(lo, hi) {
            Ok(o) => o,
            Err(Error::GapExhausted { .. }) => {
                rebalances += 1;
                let fresh = spread_orders(entries.len(), m)?;
                let ranked: Vec<usize> = by_order.values().copied().collect();
                by_order.clear();
                for (idx, y) in ranked.into_iter().zip(fresh) {
                    entries[idx].1 = y;
                    by_order.insert(y, idx);
                }
                let (lo, hi) = bounds(&by_order, &entries);
                assign_order(lo, hi).map_err(|_| Error::Capacity {
                    entries: entries.len() + 1,
                    max_order: m,
                })?
            }
            Err(e) => return Err(e),
        };

        let idx = entries.len();
        input_entry.push(idx);
        entries.push((x.clone(), order));
        nodes.push(PlanNode { left: None, right: None });
        by_order.insert(order, idx);
        match slot {
            None => {}
            Some((p, false)) => nodes[p].left = Some(idx),
            Some((p, true)) => nodes[p].right = Some(idx),
        }
    }

    let mut preorder = Vec::with_capacity(entries.len());
    let mut stack: Vec<usize> = if entries.is_empty() { vec![] } else { vec![0] };
    while let Some(i) = stack.pop() {
        preorder.push(entries[i].1);
        stack.extend(nodes[i].right);
        stack.extend(nodes[i].left);
    }

    Ok(OrderPlan {
        entries,
        input_entry,
        preorder,
        rebalances,
    })
}

/// Everything initialisation produces for one column.
#[derive(Debug, Clone)]
pub struct InitOutput {
    pub owner: OwnerState,
    pub store: OpeStore,
    /// Order assigned to each input value, in input order.
    pub orders: Vec<Order>,
}

/// Builds the owner's plaintext map and the encrypted server state for a column.
pub fn init_state<R: RngCore + CryptoRng>(
    dataset: &[BigUint],
    params: &TableParams,
    sk: &PrivateKey,
    opts: &InitOptions<'_>,
    rng: &mut R,
) -> Result<InitOutput> {
    let limit = BigUint::from(1u8) << params.l;
    if let Some(x) = dataset.iter().find(|x| **x >= limit) {
        return Err(Error::Domain(format!("plaintext {x} does not fit in {} bits", params.l)));
    }
    if dataset.len() as u128 + 1 >= params.max_order {
        return Err(Error::Config(format!(
            "maximum order {} is too small for {} values",
            params.max_order,
            dataset.len()
        )));
    }
    if params.max_order.is_power_of_two() {
        log::warn!("maximum order {} is a power of two", params.max_order);
    }
    let pk = sk.public_key();
    if pk.n().bits() <= u64::from(params.l) + 1 {
        return Err(Error::Config("plaintext length does not fit the key".into()));
    }
    let mac = match opts.integrity {
        IntegrityMode::Off => None,
        _ => Some(opts.mac_params.ok_or_else(|| {
            Error::Config("integrity mode requires group parameters".into())
        })?),
    };
    if let (IntegrityMode::Pedersen, Some(mp)) = (opts.integrity, mac) {
        // blinded exponents a + r' are decrypted by the owner
        if pk.n() <= &(&mp.q << 1u32) {
            return Err(Error::Config("Pedersen blinding needs a key wider than the group order".into()));
        }
    }

    let plan = plan_orders(dataset, params, rng)?;
    if plan.rebalances > 0 {
        log::info!("initialisation rebalanced {} times", plan.rebalances);
    }

    let encrypt = |m: &BigUint, rng: &mut R| -> Result<HomCiphertext> {
        let rn = sk.fast_nonce_power(rng);
        pk.encrypt_with_nonce_power(m, &rn)
    };

    let mut fh_bounds: HashMap<&BigUint, (Order, Order)> = HashMap::new();
    if params.mode == Mode::FrequencyHiding {
        for (x, y) in &plan.entries {
            let e = fh_bounds.entry(x).or_insert((*y, *y));
            e.0 = e.0.min(*y);
            e.1 = e.1.max(*y);
        }
    }

    let mut owner = OwnerState::new();
    let mut table = OpeTable::new();
    for (x, y) in &plan.entries {
        let mut entry = OpeEntry::owner(encrypt(x, rng)?, *y);
        if let Some(&(lo, hi)) = fh_bounds.get(x) {
            // fresh encryptions per entry, identical bytes would expose duplicates
            entry.fh_min = Some(encrypt(&BigUint::from(lo), rng)?);
            entry.fh_max = Some(encrypt(&BigUint::from(hi), rng)?);
        }
        entry.tag = match (opts.integrity, mac) {
            (IntegrityMode::DlMac, Some(mp)) => Some(NodeTag::DlMac(dl_mac_make(x, mp))),
            (IntegrityMode::Pedersen, Some(mp)) => {
                let a = mp.random_exponent(rng);
                Some(NodeTag::Pedersen {
                    commitment: ped_commit_make(x, &a, mp),
                    blinding: encrypt(&a, rng)?,
                })
            }
            _ => None,
        };
        owner.insert(*y, x.clone())?;
        table.insert(*y, entry);
    }

    let tree = match opts.shape {
        TreeShape::Insertion => OpeTree::from_preorder(&plan.preorder)?,
        TreeShape::Balanced => OpeTree::balanced(&table.keys().copied().collect::<Vec<_>>())?,
    };
    let layout = StoreLayout {
        cipher_width: pk.ciphertext_width(),
        integrity: opts.integrity,
        tag_width: mac.map_or(0, MacParams::byte_width),
    };
    let store = OpeStore::from_parts(*params, layout, table, tree)?;
    let orders = plan.input_entry.iter().map(|&i| plan.entries[i].1).collect();
    Ok(InitOutput { owner, store, orders })
}
