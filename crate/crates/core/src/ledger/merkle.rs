//! Binary Merkle tree over record ids.
//!
//! Leaves are `H(0x00 ‖ id)`, internal nodes `H(0x01 ‖ left ‖ right)`. A level
//! with an odd node count duplicates its last node, so every level of an
//! `n`-leaf tree contributes exactly one sibling to a proof.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Hash32, LedgerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Sibling path from a leaf to the root. `side` is the sibling's position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_index: u64,
    pub siblings: Vec<(Hash32, Side)>,
}

pub fn leaf_hash(record_id: &Hash32) -> Hash32 {
    let mut h = Sha256::new();
    h.update([0x00]);
    h.update(record_id.as_bytes());
    Hash32(h.finalize().into())
}

pub fn node_hash(left: &Hash32, right: &Hash32) -> Hash32 {
    let mut h = Sha256::new();
    h.update([0x01]);
    h.update(left.as_bytes());
    h.update(right.as_bytes());
    Hash32(h.finalize().into())
}

fn next_level(level: &[Hash32]) -> Vec<Hash32> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => node_hash(l, r),
            [only] => node_hash(only, only),
            _ => unreachable!(),
        })
        .collect()
}

pub fn compute_merkle_root(leaves: &[Hash32]) -> Result<Hash32, LedgerError> {
    if leaves.is_empty() {
        return Err(LedgerError::EmptyLeaves);
    }
    let mut level: Vec<Hash32> = leaves.iter().map(leaf_hash).collect();
    while level.len() > 1 {
        level = next_level(&level);
    }
    Ok(level[0])
}

/// Proof for `leaves[index]`. Panics if `index` is out of range.
pub(crate) fn build_proof(leaves: &[Hash32], index: usize) -> MerkleProof {
    assert!(index < leaves.len(), "leaf index out of range");
    let mut level: Vec<Hash32> = leaves.iter().map(leaf_hash).collect();
    let mut idx = index;
    let mut siblings = Vec::new();
    while level.len() > 1 {
        let entry = if idx % 2 == 0 {
            // odd tail: the node is paired with itself
            let sib = level.get(idx + 1).copied().unwrap_or(level[idx]);
            (sib, Side::Right)
        } else {
            (level[idx - 1], Side::Left)
        };
        siblings.push(entry);
        level = next_level(&level);
        idx /= 2;
    }
    MerkleProof {
        leaf_index: index as u64,
        siblings,
    }
}

/// True iff replaying `proof` from `record_id`'s leaf hash yields `root`.
///
/// Sibling sides must also agree with the bits of `leaf_index`.
pub fn verify_proof(record_id: &Hash32, proof: &MerkleProof, root: &Hash32) -> bool {
    if proof.siblings.len() < 64 && proof.leaf_index >> proof.siblings.len() != 0 {
        return false;
    }
    let mut acc = leaf_hash(record_id);
    for (level, (sib, side)) in proof.siblings.iter().enumerate() {
        let bit = level < 64 && (proof.leaf_index >> level) & 1 == 1;
        acc = match (side, bit) {
            (Side::Right, false) => node_hash(&acc, sib),
            (Side::Left, true) => node_hash(sib, &acc),
            _ => return false,
        };
    }
    acc == *root
}
