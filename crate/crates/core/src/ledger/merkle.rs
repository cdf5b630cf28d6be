//! Binary Merkle tree over entry digests.
//!
//! Leaves are entry digests, internal nodes are `H(0xFF || left || right)`.
//! A level with an odd node count pairs its last node with itself, so an
//! inclusion path for an `n`-leaf tree always has `ceil(log2 n)` steps.
//!
//! Complete subtrees never change once all their leaves exist, so they are
//! cached per level; only the right edge is recomputed for a given size.

use crate::crypto::{hash_parts, Digest};

pub const NODE_PREFIX: u8 = 0xFF;

pub fn node_hash(left: &Digest, right: &Digest) -> Digest {
    hash_parts(&[&[NODE_PREFIX], &left.0, &right.0])
}

/// Which side the sibling sits on relative to the running hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Side {
    L,
    R,
}

#[derive(Debug, Clone, Default)]
pub struct MerkleTree {
    // levels[0] holds every leaf; levels[k] holds the roots of complete
    // subtrees of 2^k leaves, in order.
    levels: Vec<Vec<Digest>>,
}

/// Number of levels above the leaves for an `n`-leaf tree.
pub fn depth(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

fn count_at(n: u64, level: u32) -> u64 {
    // ceil(n / 2^level)
    if level >= 64 {
        return 1;
    }
    (n + (1u64 << level) - 1) >> level
}

impl MerkleTree {
    pub fn new() -> Self {
        MerkleTree { levels: vec![Vec::new()] }
    }

    pub fn len(&self) -> u64 {
        self.levels[0].len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.levels[0].is_empty()
    }

    pub fn leaf(&self, i: u64) -> Option<Digest> {
        self.levels[0].get(i as usize).copied()
    }

    pub fn push(&mut self, leaf: Digest) {
        self.levels[0].push(leaf);
        let mut k = 0;
        while self.levels[k].len() % 2 == 0 {
            let l = &self.levels[k];
            let parent = node_hash(&l[l.len() - 2], &l[l.len() - 1]);
            if self.levels.len() == k + 1 {
                self.levels.push(Vec::new());
            }
            self.levels[k + 1].push(parent);
            k += 1;
        }
    }

    /// Drops every leaf at index `n` and beyond.
    pub fn truncate(&mut self, n: u64) {
        for (k, level) in self.levels.iter_mut().enumerate() {
            level.truncate((n >> k) as usize);
        }
    }

    fn node(&self, level: u32, index: u64, n: u64) -> Digest {
        if level == 0 {
            return self.levels[0][index as usize];
        }
        if (index + 1) << level <= n {
            return self.levels[level as usize][index as usize];
        }
        let below = count_at(n, level - 1);
        let left = self.node(level - 1, 2 * index, n);
        let right = if 2 * index + 1 < below {
            self.node(level - 1, 2 * index + 1, n)
        } else {
            left
        };
        node_hash(&left, &right)
    }

    /// Root of the tree formed by the first `n` leaves.
    pub fn root_at(&self, n: u64) -> Option<Digest> {
        if n == 0 || n > self.len() {
            return None;
        }
        Some(self.node(depth(n), 0, n))
    }

    pub fn root(&self) -> Option<Digest> {
        self.root_at(self.len())
    }

    /// Inclusion path for leaf `index` in the tree of the first `n` leaves.
    pub fn path(&self, index: u64, n: u64) -> Option<Vec<(Side, Digest)>> {
        if index >= n || n > self.len() {
            return None;
        }
        let mut out = Vec::with_capacity(depth(n) as usize);
        let mut idx = index;
        for level in 0..depth(n) {
            let count = count_at(n, level);
            let step = if idx % 2 == 1 {
                (Side::L, self.node(level, idx - 1, n))
            } else if idx + 1 < count {
                (Side::R, self.node(level, idx + 1, n))
            } else {
                (Side::R, self.node(level, idx, n))
            };
            out.push(step);
            idx /= 2;
        }
        Some(out)
    }
}

/// Replays an inclusion path. Returns the computed root and the leaf index
/// implied by the sibling sides.
pub fn replay_path(leaf: &Digest, path: &[(Side, Digest)]) -> (Digest, u64) {
    let mut acc = *leaf;
    let mut index = 0u64;
    for (level, (side, sibling)) in path.iter().enumerate() {
        acc = match side {
            Side::L => {
                if level < 64 {
                    index |= 1 << level;
                }
                node_hash(sibling, &acc)
            }
            Side::R => node_hash(&acc, sibling),
        };
    }
    (acc, index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;

    /// Level-by-level rebuild with explicit duplication; shares nothing with
    /// the cached implementation above.
    fn brute_root(leaves: &[Digest]) -> Digest {
        let mut level = leaves.to_vec();
        while level.len() > 1 {
            if level.len() % 2 == 1 {
                level.push(*level.last().unwrap());
            }
            level = level.chunks(2).map(|p| node_hash(&p[0], &p[1])).collect();
        }
        level[0]
    }

    fn leaves(n: usize) -> Vec<Digest> {
        (0..n).map(|i| hash(&(i as u64).to_le_bytes())).collect()
    }

    #[test]
    fn depth_is_ceil_log2() {
        let expected = [(1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (8, 3), (9, 4), (1024, 10), (1025, 11)];
        for (n, d) in expected {
            assert_eq!(depth(n), d, "n={n}");
        }
    }

    #[test]
    fn roots_match_brute_force_for_every_prefix() {
        let ls = leaves(70);
        let mut t = MerkleTree::new();
        for l in &ls {
            t.push(*l);
        }
        for n in 1..=70u64 {
            assert_eq!(t.root_at(n).unwrap(), brute_root(&ls[..n as usize]), "n={n}");
        }
    }

    #[test]
    fn single_leaf_root_is_the_leaf() {
        let mut t = MerkleTree::new();
        let l = hash(b"only");
        t.push(l);
        assert_eq!(t.root().unwrap(), l);
        assert!(t.path(0, 1).unwrap().is_empty());
    }

    #[test]
    fn every_path_replays_to_root_and_index() {
        let ls = leaves(64);
        let mut t = MerkleTree::new();
        for l in &ls {
            t.push(*l);
        }
        for n in 1..=64u64 {
            let root = t.root_at(n).unwrap();
            for i in 0..n {
                let p = t.path(i, n).unwrap();
                assert_eq!(p.len() as u32, depth(n));
                assert_eq!(replay_path(&ls[i as usize], &p), (root, i), "n={n} i={i}");
            }
        }
    }

    #[test]
    fn truncate_restores_earlier_state() {
        let ls = leaves(37);
        let mut t = MerkleTree::new();
        for l in &ls {
            t.push(*l);
        }
        t.truncate(21);
        assert_eq!(t.len(), 21);
        assert_eq!(t.root().unwrap(), brute_root(&ls[..21]));
        for l in &ls[21..] {
            t.push(*l);
        }
        assert_eq!(t.root().unwrap(), brute_root(&ls));
    }
}
