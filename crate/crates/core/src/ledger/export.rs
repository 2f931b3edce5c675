//! JSON Lines export and import.
//!
//! A ledger directory holds three files: `ledger.jsonl` (one record per line,
//! append order), `blocks.json` (array of block headers) and `keys.json`
//! (agent id to hex public key). Export is canonical, so
//! export → import → export is byte-identical.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};

use super::{Block, BehaviorRecord, Hash32, Ledger, LedgerError, RecordKind, Slot};

pub const RECORDS_FILE: &str = "ledger.jsonl";
pub const BLOCKS_FILE: &str = "blocks.json";
pub const KEYS_FILE: &str = "keys.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    record_id: Hash32,
    agent_id: String,
    epoch: u64,
    kind: RecordKind,
    payload: String,
    timestamp: u64,
    signature: String,
}

impl From<&BehaviorRecord> for RecordLine {
    fn from(r: &BehaviorRecord) -> Self {
        RecordLine {
            record_id: r.record_id,
            agent_id: r.agent_id.clone(),
            epoch: r.epoch,
            kind: r.kind,
            payload: hex::encode(&r.payload),
            timestamp: r.timestamp,
            signature: hex::encode(&r.signature),
        }
    }
}

impl TryFrom<RecordLine> for BehaviorRecord {
    type Error = LedgerError;

    fn try_from(l: RecordLine) -> Result<Self, Self::Error> {
        let payload = hex::decode(&l.payload)
            .map_err(|e| LedgerError::Import(format!("payload hex: {e}")))?;
        let signature = hex::decode(&l.signature)
            .map_err(|e| LedgerError::Import(format!("signature hex: {e}")))?;
        Ok(BehaviorRecord {
            record_id: l.record_id,
            agent_id: l.agent_id,
            epoch: l.epoch,
            kind: l.kind,
            payload,
            timestamp: l.timestamp,
            signature,
        })
    }
}

fn json_err(what: &str, e: serde_json::Error) -> LedgerError {
    LedgerError::Import(format!("{what}: {e}"))
}

impl Ledger {
    pub fn export_records(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&RecordLine::from(r)).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn export_blocks(&self) -> String {
        let mut s = serde_json::to_string(&self.blocks).expect("serializable");
        s.push('\n');
        s
    }

    pub fn export_keys(&self) -> String {
        let keys: BTreeMap<&str, String> = self
            .keys
            .iter()
            .map(|(a, k)| (a.as_str(), hex::encode(k.as_bytes())))
            .collect();
        let mut s = serde_json::to_string(&keys).expect("serializable");
        s.push('\n');
        s
    }

    pub fn export_dir(&self, dir: &Path) -> Result<(), LedgerError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RECORDS_FILE), self.export_records())?;
        fs::write(dir.join(BLOCKS_FILE), self.export_blocks())?;
        fs::write(dir.join(KEYS_FILE), self.export_keys())?;
        Ok(())
    }

    /// Rebuild storage verbatim. No integrity checks beyond structural
    /// consistency; run [`Ledger::verify_chain`] afterwards.
    pub fn import(records: &str, blocks: &str, keys: &str) -> Result<Ledger, LedgerError> {
        let mut ledger = Ledger::new();

        let keys: BTreeMap<String, String> =
            serde_json::from_str(keys).map_err(|e| json_err("keys", e))?;
        for (agent, hex_key) in keys {
            let mut bytes = [0u8; 32];
            hex::decode_to_slice(&hex_key, &mut bytes)
                .map_err(|e| LedgerError::Import(format!("key for {agent}: {e}")))?;
            let key = VerifyingKey::from_bytes(&bytes)
                .map_err(|e| LedgerError::Import(format!("key for {agent}: {e}")))?;
            ledger.keys.insert(agent, key);
        }

        let blocks: Vec<Block> = serde_json::from_str(blocks).map_err(|e| json_err("blocks", e))?;
        for (i, b) in blocks.iter().enumerate() {
            if b.height != i as u64 {
                return Err(LedgerError::Import(format!(
                    "block at position {i} claims height {}",
                    b.height
                )));
            }
        }

        if !records.is_empty() && !records.ends_with('\n') {
            return Err(LedgerError::Import("record stream does not end with a newline".into()));
        }
        let mut seen = HashSet::new();
        for (n, line) in records.lines().enumerate() {
            let parsed: RecordLine =
                serde_json::from_str(line).map_err(|e| json_err(&format!("line {}", n + 1), e))?;
            let record = BehaviorRecord::try_from(parsed)?;
            if !seen.insert(record.record_id) {
                return Err(LedgerError::Import(format!(
                    "line {}: duplicate record id {}",
                    n + 1,
                    record.record_id
                )));
            }
            ledger.insert_unchecked(record, None);
        }

        for b in &blocks {
            for id in &b.record_ids {
                let pos = *ledger.positions.get(id).ok_or_else(|| {
                    LedgerError::Import(format!(
                        "block {} references record {id} absent from the record stream",
                        b.height
                    ))
                })?;
                let slot: &mut Slot = &mut ledger.slots[pos];
                if slot.block.replace(b.height).is_some() {
                    return Err(LedgerError::Import(format!("record {id} sealed twice")));
                }
            }
        }
        ledger.pending = ledger
            .slots
            .iter()
            .filter(|s| s.block.is_none())
            .map(|s| s.record.record_id)
            .collect();
        ledger.blocks = blocks;
        Ok(ledger)
    }

    pub fn import_dir(dir: &Path) -> Result<Ledger, LedgerError> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name))
                .map_err(|e| LedgerError::Import(format!("{}: {e}", dir.join(name).display())))
        };
        Ledger::import(&read(RECORDS_FILE)?, &read(BLOCKS_FILE)?, &read(KEYS_FILE)?)
    }
}
