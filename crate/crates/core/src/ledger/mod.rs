//! Append-only, tamper-evident behavior ledger.
//!
//! Records enter a pending pool on [`Ledger::append_record`] and are batched
//! into hash-chained blocks by [`Ledger::seal_block`]. Every block commits to
//! its records through a Merkle root, and every sealed record has an
//! inclusion proof.

mod export;
mod merkle;
mod record;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::RangeInclusive;

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use export::{BLOCKS_FILE, KEYS_FILE, RECORDS_FILE};
pub use merkle::{compute_merkle_root, leaf_hash, node_hash, verify_proof, MerkleProof, Side};
pub use record::{BehaviorRecord, Hash32, Payload, RecordKind};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("signature does not verify for agent {0}")]
    InvalidSignature(String),
    #[error("no public key registered for agent {0}")]
    UnknownSigner(String),
    #[error("public key already registered for agent {0}")]
    KeyAlreadyRegistered(String),
    #[error("record {0} already on the ledger")]
    DuplicateRecord(Hash32),
    #[error("record id {claimed} does not match content hash {actual}")]
    RecordIdMismatch { claimed: Hash32, actual: Hash32 },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("cannot seal an empty pool")]
    EmptyPool,
    #[error("cannot build a Merkle root over zero leaves")]
    EmptyLeaves,
    #[error("unknown record {0}")]
    UnknownRecord(Hash32),
    #[error("record {0} is still pending")]
    NotYetSealed(Hash32),
    #[error("import failed: {0}")]
    Import(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sealed batch of records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Hash32,
    pub merkle_root: Hash32,
    pub epoch: u64,
    pub record_ids: Vec<Hash32>,
    pub header_hash: Hash32,
}

impl Block {
    pub fn compute_header_hash(&self) -> Hash32 {
        header_hash(self.height, &self.prev_hash, &self.merkle_root, self.epoch)
    }
}

/// `H(height ‖ prev_hash ‖ merkle_root ‖ epoch)` with big-endian integers.
pub fn header_hash(height: u64, prev_hash: &Hash32, merkle_root: &Hash32, epoch: u64) -> Hash32 {
    let mut buf = Vec::with_capacity(80);
    buf.extend_from_slice(&height.to_be_bytes());
    buf.extend_from_slice(prev_hash.as_bytes());
    buf.extend_from_slice(merkle_root.as_bytes());
    buf.extend_from_slice(&epoch.to_be_bytes());
    Hash32::digest(&buf)
}

/// One failed integrity check found by [`Ledger::verify_chain`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum ChainViolation {
    /// Stored header hash differs from the recomputed one.
    HeaderHash { height: u64 },
    /// Root recomputed from the stored records differs from the header.
    MerkleRoot { height: u64 },
    /// A listed record id has no stored record.
    MissingRecord { height: u64, record_id: Hash32 },
    /// A stored record's id differs from the hash of its content.
    RecordId { height: u64, record_id: Hash32 },
    /// `prev_hash` differs from the recomputed header of the predecessor.
    BrokenLink { height: u64 },
    /// Locally linked, but some ancestor's link is broken.
    Unanchored { height: u64 },
}

impl ChainViolation {
    pub fn height(&self) -> u64 {
        match self {
            ChainViolation::HeaderHash { height }
            | ChainViolation::MerkleRoot { height }
            | ChainViolation::MissingRecord { height, .. }
            | ChainViolation::RecordId { height, .. }
            | ChainViolation::BrokenLink { height }
            | ChainViolation::Unanchored { height } => *height,
        }
    }
}

impl fmt::Display for ChainViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainViolation::HeaderHash { height } => write!(f, "block {height}: header hash mismatch"),
            ChainViolation::MerkleRoot { height } => write!(f, "block {height}: merkle_root mismatch"),
            ChainViolation::MissingRecord { height, record_id } => {
                write!(f, "block {height}: record {record_id} missing from storage")
            }
            ChainViolation::RecordId { height, record_id } => {
                write!(f, "block {height}: record {record_id} does not hash to its id")
            }
            ChainViolation::BrokenLink { height } => write!(f, "block {height}: prev_hash linkage broken"),
            ChainViolation::Unanchored { height } => {
                write!(f, "block {height}: not anchored to genesis (ancestor linkage broken)")
            }
        }
    }
}

/// Secondary indexes over every appended record.
#[derive(Debug, Clone, Default)]
pub struct LedgerIndex {
    pub by_agent: BTreeMap<String, Vec<Hash32>>,
    pub by_epoch: BTreeMap<u64, Vec<Hash32>>,
}

/// Conjunctive query predicate; `None` fields match everything.
#[derive(Debug, Clone, Default)]
pub struct RecordFilter {
    pub agent_id: Option<String>,
    pub epochs: Option<RangeInclusive<u64>>,
    pub kind: Option<RecordKind>,
}

impl RecordFilter {
    pub fn agent(mut self, agent_id: impl Into<String>) -> Self {
        self.agent_id = Some(agent_id.into());
        self
    }

    pub fn epochs(mut self, range: RangeInclusive<u64>) -> Self {
        self.epochs = Some(range);
        self
    }

    pub fn kind(mut self, kind: RecordKind) -> Self {
        self.kind = Some(kind);
        self
    }

    pub fn matches(&self, r: &BehaviorRecord) -> bool {
        self.agent_id.as_deref().is_none_or(|a| a == r.agent_id)
            && self.epochs.as_ref().is_none_or(|e| e.contains(&r.epoch))
            && self.kind.is_none_or(|k| k == r.kind)
    }
}

#[derive(Debug, Clone)]
struct Slot {
    record: BehaviorRecord,
    block: Option<u64>,
}

/// In-memory ledger. Single writer; `&Ledger` is safe to share for reads.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    slots: Vec<Slot>,
    positions: HashMap<Hash32, usize>,
    pending: Vec<Hash32>,
    blocks: Vec<Block>,
    index: LedgerIndex,
    keys: BTreeMap<String, VerifyingKey>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_key(&mut self, agent_id: &str, key: VerifyingKey) -> Result<(), LedgerError> {
        if self.keys.contains_key(agent_id) {
            return Err(LedgerError::KeyAlreadyRegistered(agent_id.to_string()));
        }
        self.keys.insert(agent_id.to_string(), key);
        Ok(())
    }

    pub fn public_key(&self, agent_id: &str) -> Option<&VerifyingKey> {
        self.keys.get(agent_id)
    }

    pub fn has_signer(&self, agent_id: &str) -> bool {
        self.keys.contains_key(agent_id)
    }

    pub fn append_record(&mut self, record: BehaviorRecord) -> Result<Hash32, LedgerError> {
        Payload::decode(&record.payload)?;
        let key = self
            .keys
            .get(&record.agent_id)
            .ok_or_else(|| LedgerError::UnknownSigner(record.agent_id.clone()))?;
        if !record.verify_signature(key) {
            return Err(LedgerError::InvalidSignature(record.agent_id.clone()));
        }
        let actual = record.compute_id();
        if actual != record.record_id {
            return Err(LedgerError::RecordIdMismatch {
                claimed: record.record_id,
                actual,
            });
        }
        if self.positions.contains_key(&actual) {
            return Err(LedgerError::DuplicateRecord(actual));
        }
        self.insert_unchecked(record, None);
        self.pending.push(actual);
        Ok(actual)
    }

    fn insert_unchecked(&mut self, record: BehaviorRecord, block: Option<u64>) {
        let id = record.record_id;
        self.index
            .by_agent
            .entry(record.agent_id.clone())
            .or_default()
            .push(id);
        self.index.by_epoch.entry(record.epoch).or_default().push(id);
        self.positions.insert(id, self.slots.len());
        self.slots.push(Slot { record, block });
    }

    /// Seal pending records, in append order, into a block on the tip.
    pub fn seal_block(&mut self, epoch: u64) -> Result<&Block, LedgerError> {
        if self.pending.is_empty() {
            return Err(LedgerError::EmptyPool);
        }
        let record_ids = std::mem::take(&mut self.pending);
        let merkle_root = compute_merkle_root(&record_ids)?;
        let height = self.blocks.len() as u64;
        let prev_hash = self.blocks.last().map_or(Hash32::ZERO, |b| b.header_hash);
        for id in &record_ids {
            let pos = self.positions[id];
            self.slots[pos].block = Some(height);
        }
        let header_hash = header_hash(height, &prev_hash, &merkle_root, epoch);
        self.blocks.push(Block {
            height,
            prev_hash,
            merkle_root,
            epoch,
            record_ids,
            header_hash,
        });
        Ok(self.blocks.last().expect("just pushed"))
    }

    pub fn prove_inclusion(&self, record_id: &Hash32) -> Result<MerkleProof, LedgerError> {
        let pos = *self
            .positions
            .get(record_id)
            .ok_or(LedgerError::UnknownRecord(*record_id))?;
        let height = self.slots[pos]
            .block
            .ok_or(LedgerError::NotYetSealed(*record_id))?;
        let block = &self.blocks[height as usize];
        let leaf = block
            .record_ids
            .iter()
            .position(|id| id == record_id)
            .ok_or(LedgerError::UnknownRecord(*record_id))?;
        Ok(merkle::build_proof(&block.record_ids, leaf))
    }

    /// Block holding `record_id`, if sealed.
    pub fn block_of(&self, record_id: &Hash32) -> Option<&Block> {
        let pos = *self.positions.get(record_id)?;
        self.slots[pos].block.map(|h| &self.blocks[h as usize])
    }

    /// Proves `record_id` and checks the proof against its block root.
    pub fn verify_inclusion(&self, record_id: &Hash32) -> bool {
        match (self.prove_inclusion(record_id), self.block_of(record_id)) {
            (Ok(proof), Some(block)) => verify_proof(record_id, &proof, &block.merkle_root),
            _ => false,
        }
    }

    pub fn verify_chain(&self) -> Vec<ChainViolation> {
        let mut violations = Vec::new();
        let mut expected_prev = Hash32::ZERO;
        let mut anchored = true;
        // violations name the chain position, which a forged height cannot move
        for (h, block) in self.blocks.iter().enumerate() {
            let h = h as u64;
            let recomputed_header = block.compute_header_hash();
            if recomputed_header != block.header_hash {
                violations.push(ChainViolation::HeaderHash { height: h });
            }

            let mut ids = Vec::with_capacity(block.record_ids.len());
            let mut complete = true;
            for id in &block.record_ids {
                match self.positions.get(id) {
                    Some(&pos) => {
                        let id = self.slots[pos].record.compute_id();
                        if id != self.slots[pos].record.record_id {
                            violations.push(ChainViolation::RecordId {
                                height: h,
                                record_id: self.slots[pos].record.record_id,
                            });
                        }
                        ids.push(id);
                    }
                    None => {
                        complete = false;
                        violations.push(ChainViolation::MissingRecord {
                            height: h,
                            record_id: *id,
                        });
                    }
                }
            }
            let root_ok = complete
                && compute_merkle_root(&ids).is_ok_and(|root| root == block.merkle_root);
            if !root_ok {
                violations.push(ChainViolation::MerkleRoot { height: h });
            }

            if block.prev_hash != expected_prev {
                violations.push(ChainViolation::BrokenLink { height: h });
                anchored = false;
            } else if !anchored {
                violations.push(ChainViolation::Unanchored { height: h });
            }
            expected_prev = recomputed_header;
        }
        violations
    }

    /// Sealed records matching `filter`, in append order.
    pub fn query(&self, filter: &RecordFilter) -> Vec<&BehaviorRecord> {
        let mut positions: Vec<usize> = match (&filter.agent_id, &filter.epochs) {
            (Some(agent), _) => self
                .index
                .by_agent
                .get(agent)
                .map(|ids| ids.iter().map(|id| self.positions[id]).collect())
                .unwrap_or_default(),
            (None, Some(range)) => self
                .index
                .by_epoch
                .range(range.clone())
                .flat_map(|(_, ids)| ids.iter().map(|id| self.positions[id]))
                .collect(),
            (None, None) => (0..self.slots.len()).collect(),
        };
        positions.sort_unstable();
        positions
            .into_iter()
            .map(|p| &self.slots[p])
            .filter(|s| s.block.is_some() && filter.matches(&s.record))
            .map(|s| &s.record)
            .collect()
    }

    pub fn get(&self, record_id: &Hash32) -> Option<&BehaviorRecord> {
        self.positions.get(record_id).map(|&p| &self.slots[p].record)
    }

    pub fn contains(&self, record_id: &Hash32) -> bool {
        self.positions.contains_key(record_id)
    }

    pub fn is_sealed(&self, record_id: &Hash32) -> bool {
        self.positions
            .get(record_id)
            .is_some_and(|&p| self.slots[p].block.is_some())
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn tip(&self) -> Option<&Block> {
        self.blocks.last()
    }

    pub fn pending(&self) -> &[Hash32] {
        &self.pending
    }

    pub fn index(&self) -> &LedgerIndex {
        &self.index
    }

    /// All records, sealed or pending, in append order.
    pub fn records(&self) -> impl Iterator<Item = &BehaviorRecord> {
        self.slots.iter().map(|s| &s.record)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Records whose signature fails against the registered key, or whose
    /// signer is unknown.
    pub fn verify_signatures(&self) -> Vec<Hash32> {
        self.slots
            .iter()
            .filter(|s| {
                self.keys
                    .get(&s.record.agent_id)
                    .is_none_or(|k| !s.record.verify_signature(k))
            })
            .map(|s| s.record.record_id)
            .collect()
    }

    /// Direct storage access that bypasses every check. For audits and
    /// fault injection only.
    pub fn storage_record_mut(&mut self, record_id: &Hash32) -> Option<&mut BehaviorRecord> {
        let pos = *self.positions.get(record_id)?;
        Some(&mut self.slots[pos].record)
    }

    /// See [`Ledger::storage_record_mut`].
    pub fn storage_block_mut(&mut self, height: u64) -> Option<&mut Block> {
        self.blocks.get_mut(height as usize)
    }
}
