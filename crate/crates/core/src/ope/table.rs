use std::collections::BTreeMap;
use std::ops::Bound;

use super::tree::OpeTree;
use super::{assign_order, spread_orders, OpeEntry, Order, Origin, Remap, Side, TableParams};
use crate::error::{Error, Result};
use crate::integrity::IntegrityMode;
use crate::transport::SessionId;

/// Entries keyed by order.
pub type OpeTable = BTreeMap<Order, OpeEntry>;

/// Fixed record widths of a persisted table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreLayout {
    /// Residue width of one ciphertext record, in bytes.
    pub cipher_width: usize,
    pub integrity: IntegrityMode,
    /// Width of group elements in node tags; 0 without integrity.
    pub tag_width: usize,
}

/// Orders bracketing a new entry placed next to an existing node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbors {
    pub left: Order,
    pub right: Order,
    /// The real entry on the far side of the gap, if any.
    pub neighbor: Option<Order>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertionPlan {
    pub order: Order,
    /// Set when the gap was exhausted and every order moved.
    pub remap: Option<Remap>,
    /// Tree slot of the new node, `None` when the tree is rebuilt or empty.
    pub parent: Option<(Order, Side)>,
}

/// Server-side state: table plus search tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpeStore {
    params: TableParams,
    layout: StoreLayout,
    table: OpeTable,
    tree: OpeTree,
}

impl OpeStore {
    pub fn new(params: TableParams, layout: StoreLayout) -> Self {
        Self {
            params,
            layout,
            table: OpeTable::new(),
            tree: OpeTree::new(),
        }
    }

    /// Assembles a store and checks that tree and table agree.
    pub fn from_parts(params: TableParams, layout: StoreLayout, table: OpeTable, tree: OpeTree) -> Result<Self> {
        let store = Self {
            params,
            layout,
            table,
            tree,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn validate(&self) -> Result<()> {
        if let (Some((&lo, _)), Some((&hi, _))) = (self.table.first_key_value(), self.table.last_key_value()) {
            if lo == 0 || hi >= self.params.max_order {
                return Err(Error::Corrupt(format!("orders must lie in [1, {})", self.params.max_order)));
            }
        }
        if let Some((o, _)) = self.table.iter().find(|(o, e)| **o != e.order) {
            return Err(Error::Corrupt(format!("entry keyed {o} carries a different order")));
        }
        if !self.tree.inorder().into_iter().eq(self.table.keys().copied()) {
            return Err(Error::Corrupt("tree in-order traversal differs from the table".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> &TableParams {
        &self.params
    }

    pub fn layout(&self) -> &StoreLayout {
        &self.layout
    }

    pub fn table(&self) -> &OpeTable {
        &self.table
    }

    pub fn tree(&self) -> &OpeTree {
        &self.tree
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn height(&self) -> usize {
        self.tree.height()
    }

    pub fn root(&self) -> Option<Order> {
        self.tree.root()
    }

    pub fn entry(&self, order: Order) -> Result<&OpeEntry> {
        self.table
            .get(&order)
            .ok_or_else(|| Error::Usage(format!("order {order} is not in the table")))
    }

    pub fn child(&self, order: Order, side: Side) -> Result<Option<Order>> {
        self.tree.child(order, side)
    }

    /// `Left` gives (predecessor or 0, node); `Right` gives (node, successor or M).
    pub fn neighbors(&self, order: Order, side: Side) -> Result<Neighbors> {
        self.entry(order)?;
        Ok(match side {
            Side::Left => {
                let pred = self.table.range(..order).next_back().map(|(&o, _)| o);
                Neighbors {
                    left: pred.unwrap_or(0),
                    right: order,
                    neighbor: pred,
                }
            }
            Side::Right => {
                let succ = self
                    .table
                    .range((Bound::Excluded(order), Bound::Unbounded))
                    .next()
                    .map(|(&o, _)| o);
                Neighbors {
                    left: order,
                    right: succ.unwrap_or(self.params.max_order),
                    neighbor: succ,
                }
            }
        })
    }

    /// Order for a new entry on `side` of `anchor` (`None` for an empty
    /// table). On an exhausted gap, either rebalances (returned as a remap,
    /// not yet applied) or fails with `GapExhausted`.
    pub fn plan_insert(&self, anchor: Option<(Order, Side)>, allow_rebalance: bool) -> Result<InsertionPlan> {
        let Some((node, side)) = anchor else {
            if !self.is_empty() {
                return Err(Error::Usage("insertion anchor missing for a non-empty table".into()));
            }
            return Ok(InsertionPlan {
                order: assign_order(0, self.params.max_order)?,
                remap: None,
                parent: None,
            });
        };
        if self.tree.child(node, side)?.is_some() {
            return Err(Error::Usage(format!("node {node} already has a {side:?} child")));
        }
        let nb = self.neighbors(node, side)?;
        match assign_order(nb.left, nb.right) {
            Ok(order) => Ok(InsertionPlan {
                order,
                remap: None,
                parent: Some((node, side)),
            }),
            Err(Error::GapExhausted { .. }) if allow_rebalance => {
                let remap = self.rebalance_remap()?;
                let map = |o: Order| remap.get(o).expect("remap covers every order");
                let left = if nb.left == 0 { 0 } else { map(nb.left) };
                let right = if nb.right == self.params.max_order {
                    self.params.max_order
                } else {
                    map(nb.right)
                };
                let order = assign_order(left, right).map_err(|e| match e {
                    Error::GapExhausted { .. } => Error::Capacity {
                        entries: self.len() + 1,
                        max_order: self.params.max_order,
                    },
                    e => e,
                })?;
                Ok(InsertionPlan {
                    order,
                    remap: Some(remap),
                    parent: None,
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Uniform respacing of the current entries, not applied.
    pub fn rebalance_remap(&self) -> Result<Remap> {
        let fresh = spread_orders(self.len(), self.params.max_order)?;
        Ok(Remap::from_pairs(self.table.keys().copied().zip(fresh).collect()))
    }

    /// Respaces all orders uniformly and rebuilds the tree balanced.
    pub fn rebalance(&mut self) -> Result<Remap> {
        let remap = self.rebalance_remap()?;
        self.apply_remap(&remap)?;
        Ok(remap)
    }

    pub fn apply_remap(&mut self, remap: &Remap) -> Result<()> {
        if remap.len() != self.len() || !remap.pairs().iter().map(|p| p.0).eq(self.table.keys().copied()) {
            return Err(Error::Usage("remap does not cover the table".into()));
        }
        let table: OpeTable = std::mem::take(&mut self.table)
            .into_values()
            .zip(remap.pairs())
            .map(|(mut e, &(_, new))| {
                e.order = new;
                (new, e)
            })
            .collect();
        let orders: Vec<Order> = table.keys().copied().collect();
        self.tree = OpeTree::balanced(&orders)?;
        self.table = table;
        Ok(())
    }

    /// Applies a plan produced by [`Self::plan_insert`] and adds the entry.
    pub fn commit(&mut self, mut entry: OpeEntry, plan: &InsertionPlan) -> Result<()> {
        if let Some(remap) = &plan.remap {
            self.apply_remap(remap)?;
        }
        entry.order = plan.order;
        self.insert_entry(entry, plan.parent.filter(|_| plan.remap.is_none()))
    }

    /// Inserts `entry` at its own order. With `parent`, the tree slot is
    /// checked; otherwise the node goes wherever descent puts it.
    pub fn insert_entry(&mut self, entry: OpeEntry, parent: Option<(Order, Side)>) -> Result<()> {
        let order = entry.order;
        if order == 0 || order >= self.params.max_order {
            return Err(Error::Domain(format!("order {order} outside [1, {})", self.params.max_order)));
        }
        if self.table.contains_key(&order) {
            return Err(Error::Integrity(format!("order {order} already present")));
        }
        match parent {
            Some(p) => self.tree.insert_at(order, Some(p))?,
            None => self.tree.insert(order)?,
        }
        self.table.insert(order, entry);
        Ok(())
    }

    /// Replaces the tree with the median-split tree over the current orders.
    pub fn rebuild_balanced(&mut self) -> Result<()> {
        let orders: Vec<Order> = self.table.keys().copied().collect();
        self.tree = OpeTree::balanced(&orders)?;
        Ok(())
    }

    pub fn set_tree(&mut self, tree: OpeTree) -> Result<()> {
        if !tree.inorder().into_iter().eq(self.table.keys().copied()) {
            return Err(Error::Usage("tree does not match the table".into()));
        }
        self.tree = tree;
        Ok(())
    }

    pub fn remove(&mut self, order: Order) -> Option<OpeEntry> {
        let e = self.table.remove(&order)?;
        self.tree.remove(order);
        Some(e)
    }

    /// Removes the entries inserted by the given analyst sessions.
    pub fn remove_sessions(&mut self, sessions: &[SessionId]) -> Vec<Order> {
        let doomed: Vec<Order> = self
            .table
            .iter()
            .filter(|(_, e)| matches!(e.origin, Origin::Analyst(s) if sessions.contains(&s)))
            .map(|(&o, _)| o)
            .collect();
        for &o in &doomed {
            self.remove(o);
        }
        doomed
    }
}
