use std::collections::HashMap;

use super::{Order, Side};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Node {
    left: Option<Order>,
    right: Option<Order>,
}

/// Binary search tree over the orders of an [`super::OpeTable`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpeTree {
    nodes: HashMap<Order, Node>,
    root: Option<Order>,
    /// Nodes on the longest root-to-leaf path; 0 for an empty tree.
    height: usize,
}

impl OpeTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Balanced tree over strictly increasing orders (median `len / 2` at each level).
    pub fn balanced(sorted: &[Order]) -> Result<Self> {
        if sorted.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Usage("balanced tree needs strictly increasing orders".into()));
        }
        let mut tree = OpeTree::new();
        tree.nodes.reserve(sorted.len());
        tree.root = tree.build_range(sorted);
        tree.height = balanced_height(sorted.len());
        Ok(tree)
    }

    fn build_range(&mut self, sorted: &[Order]) -> Option<Order> {
        // (slice, parent, side) work list keeps recursion depth flat
        let mut root = None;
        let mut stack: Vec<(&[Order], Option<(Order, Side)>)> = vec![(sorted, None)];
        while let Some((slice, parent)) = stack.pop() {
            if slice.is_empty() {
                continue;
            }
            let mid = slice.len() / 2;
            let order = slice[mid];
            self.nodes.insert(order, Node::default());
            match parent {
                None => root = Some(order),
                Some((p, Side::Left)) => self.nodes.get_mut(&p).expect("parent inserted").left = Some(order),
                Some((p, Side::Right)) => self.nodes.get_mut(&p).expect("parent inserted").right = Some(order),
            }
            stack.push((&slice[mid + 1..], Some((order, Side::Right))));
            stack.push((&slice[..mid], Some((order, Side::Left))));
        }
        root
    }

    /// Rebuilds a tree from its preorder sequence.
    pub fn from_preorder(preorder: &[Order]) -> Result<Self> {
        let mut tree = OpeTree::new();
        tree.nodes.reserve(preorder.len());
        for &o in preorder {
            tree.insert(o)?;
        }
        if tree.preorder() != preorder {
            return Err(Error::Corrupt("tree preorder is not a valid search-tree order".into()));
        }
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn root(&self) -> Option<Order> {
        self.root
    }

    pub fn contains(&self, order: Order) -> bool {
        self.nodes.contains_key(&order)
    }

    pub fn child(&self, order: Order, side: Side) -> Result<Option<Order>> {
        let node = self
            .nodes
            .get(&order)
            .ok_or_else(|| Error::Usage(format!("order {order} is not in the tree")))?;
        Ok(match side {
            Side::Left => node.left,
            Side::Right => node.right,
        })
    }

    /// Where a search for `order` falls off the tree: the last node visited
    /// and the side taken from it, with the depth (in nodes) of the new slot.
    fn descend(&self, order: Order) -> Result<Option<(Order, Side, usize)>> {
        let Some(mut cur) = self.root else {
            return Ok(None);
        };
        let mut depth = 1;
        loop {
            let node = self.nodes[&cur];
            let (side, next) = match order.cmp(&cur) {
                std::cmp::Ordering::Less => (Side::Left, node.left),
                std::cmp::Ordering::Greater => (Side::Right, node.right),
                std::cmp::Ordering::Equal => {
                    return Err(Error::Integrity(format!("order {order} already present in the tree")))
                }
            };
            depth += 1;
            match next {
                Some(n) => cur = n,
                None => return Ok(Some((cur, side, depth))),
            }
        }
    }

    fn attach(&mut self, order: Order, slot: Option<(Order, Side, usize)>) {
        self.nodes.insert(order, Node::default());
        match slot {
            None => {
                self.root = Some(order);
                self.height = 1;
            }
            Some((parent, side, depth)) => {
                let p = self.nodes.get_mut(&parent).expect("descent parent exists");
                match side {
                    Side::Left => p.left = Some(order),
                    Side::Right => p.right = Some(order),
                }
                self.height = self.height.max(depth);
            }
        }
    }

    /// Inserts by search-tree descent.
    pub fn insert(&mut self, order: Order) -> Result<()> {
        let slot = self.descend(order)?;
        self.attach(order, slot);
        Ok(())
    }

    /// Inserts as the `side` child of `parent`, which must be exactly where a
    /// descent for `order` ends. `parent = None` only for an empty tree.
    pub fn insert_at(&mut self, order: Order, parent: Option<(Order, Side)>) -> Result<()> {
        let slot = self.descend(order)?;
        let found = slot.map(|(p, s, _)| (p, s));
        if found != parent {
            return Err(Error::Integrity(format!(
                "order {order} does not belong under {parent:?} (search ends at {found:?})"
            )));
        }
        self.attach(order, slot);
        Ok(())
    }

    /// Standard search-tree deletion; returns whether the order was present.
    pub fn remove(&mut self, order: Order) -> bool {
        if !self.nodes.contains_key(&order) {
            return false;
        }
        // locate parent link
        let mut parent: Option<(Order, Side)> = None;
        let mut cur = self.root.expect("non-empty");
        while cur != order {
            let node = self.nodes[&cur];
            let (side, next) = if order < cur {
                (Side::Left, node.left)
            } else {
                (Side::Right, node.right)
            };
            parent = Some((cur, side));
            cur = next.expect("order present");
        }
        let node = self.nodes[&order];
        let replacement = match (node.left, node.right) {
            (None, None) => None,
            (Some(c), None) | (None, Some(c)) => Some(c),
            (Some(l), Some(r)) => {
                // splice out the in-order successor
                let mut succ_parent = order;
                let mut succ = r;
                while let Some(next) = self.nodes[&succ].left {
                    succ_parent = succ;
                    succ = next;
                }
                if succ_parent != order {
                    let succ_right = self.nodes[&succ].right;
                    self.nodes.get_mut(&succ_parent).unwrap().left = succ_right;
                    self.nodes.get_mut(&succ).unwrap().right = Some(r);
                }
                self.nodes.get_mut(&succ).unwrap().left = Some(l);
                Some(succ)
            }
        };
        self.nodes.remove(&order);
        match parent {
            None => self.root = replacement,
            Some((p, Side::Left)) => self.nodes.get_mut(&p).unwrap().left = replacement,
            Some((p, Side::Right)) => self.nodes.get_mut(&p).unwrap().right = replacement,
        }
        self.height = self.compute_height();
        true
    }

    fn compute_height(&self) -> usize {
        let mut best = 0;
        let mut stack: Vec<(Order, usize)> = self.root.map(|r| (r, 1)).into_iter().collect();
        while let Some((o, d)) = stack.pop() {
            best = best.max(d);
            let n = self.nodes[&o];
            stack.extend(n.left.map(|c| (c, d + 1)));
            stack.extend(n.right.map(|c| (c, d + 1)));
        }
        best
    }

    pub fn preorder(&self) -> Vec<Order> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack: Vec<Order> = self.root.into_iter().collect();
        while let Some(o) = stack.pop() {
            out.push(o);
            let n = self.nodes[&o];
            stack.extend(n.right);
            stack.extend(n.left);
        }
        out
    }

    pub fn inorder(&self) -> Vec<Order> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = Vec::new();
        let mut cur = self.root;
        while cur.is_some() || !stack.is_empty() {
            while let Some(o) = cur {
                stack.push(o);
                cur = self.nodes[&o].left;
            }
            let o = stack.pop().expect("stack non-empty");
            out.push(o);
            cur = self.nodes[&o].right;
        }
        out
    }
}

/// Height of the median-split tree over `n` nodes.
pub(crate) fn balanced_height(n: usize) -> usize {
    (usize::BITS - n.leading_zeros()) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn example_tree() -> OpeTree {
        // insertion order 32, 20, 25, 69, 10 -> orders 14, 7, 11, 21, 4
        OpeTree::from_preorder(&[14, 7, 4, 11, 21]).unwrap()
    }

    #[test]
    fn example_shape() {
        let t = example_tree();
        assert_eq!(t.root(), Some(14));
        assert_eq!(t.child(14, Side::Left).unwrap(), Some(7));
        assert_eq!(t.child(7, Side::Right).unwrap(), Some(11));
        assert_eq!(t.child(21, Side::Right).unwrap(), None);
        assert_eq!(t.height(), 3);
        assert_eq!(t.inorder(), vec![4, 7, 11, 14, 21]);
    }

    #[test]
    fn insert_at_checks_slot() {
        let mut t = example_tree();
        assert!(matches!(t.insert_at(6, Some((7, Side::Left))), Err(Error::Integrity(_))));
        t.insert_at(6, Some((4, Side::Right))).unwrap();
        assert_eq!(t.inorder(), vec![4, 6, 7, 11, 14, 21]);
        assert_eq!(t.height(), 4);
        assert!(matches!(t.insert(11), Err(Error::Integrity(_))));
    }

    #[test]
    fn empty_tree_insert_becomes_root() {
        let mut t = OpeTree::new();
        assert_eq!(t.height(), 0);
        t.insert_at(14, None).unwrap();
        assert_eq!(t.root(), Some(14));
        assert_eq!(t.height(), 1);
    }

    #[test]
    fn random_inserts_keep_search_property() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut t = OpeTree::new();
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < 1000 {
            let o: u128 = rng.gen_range(1..1_000_000);
            if seen.insert(o) {
                t.insert(o).unwrap();
            }
        }
        assert_eq!(t.inorder(), seen.iter().copied().collect::<Vec<_>>());
        assert_eq!(t.height(), t.compute_height());
        let rebuilt = OpeTree::from_preorder(&t.preorder()).unwrap();
        assert_eq!(rebuilt, t);
    }

    #[test]
    fn balanced_heights() {
        for n in 0..200usize {
            let orders: Vec<u128> = (1..=n as u128).collect();
            let t = OpeTree::balanced(&orders).unwrap();
            assert_eq!(t.height(), t.compute_height(), "n={n}");
            assert_eq!(t.inorder(), orders);
        }
        assert_eq!(balanced_height(1), 1);
        assert_eq!(balanced_height(1_000_000), 20);
    }

    #[test]
    fn remove_keeps_order_and_height() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut orders: Vec<u128> = (1..300).map(|i| i * 3).collect();
        orders.shuffle(&mut rng);
        let mut t = OpeTree::new();
        for &o in &orders {
            t.insert(o).unwrap();
        }
        orders.shuffle(&mut rng);
        let mut live: std::collections::BTreeSet<u128> = orders.iter().copied().collect();
        for &o in orders.iter().take(200) {
            assert!(t.remove(o));
            live.remove(&o);
            assert_eq!(t.inorder(), live.iter().copied().collect::<Vec<_>>());
            assert_eq!(t.height(), t.compute_height());
        }
        assert!(!t.remove(1));
    }

    #[test]
    fn bad_preorder_rejected() {
        assert!(OpeTree::from_preorder(&[5, 7, 3]).is_err());
        assert!(OpeTree::from_preorder(&[5, 5]).is_err());
    }
}
