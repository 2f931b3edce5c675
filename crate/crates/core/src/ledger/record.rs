//! Behavior records: the leaf unit of the ledger.
//!
//! A record's identity is the SHA-256 of its canonical encoding, signature
//! included. The signature itself covers every field except `record_id` and
//! `signature`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::LedgerError;

const RECORD_DOMAIN: &[u8] = b"regulus/record/v1";

/// A 32-byte SHA-256 digest, rendered as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Hash32(pub [u8; 32]);

impl Hash32 {
    pub const ZERO: Hash32 = Hash32([0u8; 32]);

    pub fn digest(bytes: &[u8]) -> Self {
        Hash32(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, LedgerError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| LedgerError::Import(format!("bad hash {s:?}: {e}")))?;
        Ok(Hash32(out))
    }

    /// First 8 hex digits, for diagnostics.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash32({})", self.short())
    }
}

impl Serialize for Hash32 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash32 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Hash32::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// The three data tiers an agent emits: low-level traces (`sensor_reading`,
/// `action_log`), interaction metadata (`task_assignment`,
/// `cooperation_outcome`, `coalition_event`) and semantic behavior
/// (`decision_input`, `report`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    DecisionInput,
    SensorReading,
    ActionLog,
    TaskAssignment,
    CooperationOutcome,
    CoalitionEvent,
    Report,
}

impl RecordKind {
    pub const ALL: [RecordKind; 7] = [
        RecordKind::DecisionInput,
        RecordKind::SensorReading,
        RecordKind::ActionLog,
        RecordKind::TaskAssignment,
        RecordKind::CooperationOutcome,
        RecordKind::CoalitionEvent,
        RecordKind::Report,
    ];

    fn tag(self) -> u8 {
        match self {
            RecordKind::DecisionInput => 0,
            RecordKind::SensorReading => 1,
            RecordKind::ActionLog => 2,
            RecordKind::TaskAssignment => 3,
            RecordKind::CooperationOutcome => 4,
            RecordKind::CoalitionEvent => 5,
            RecordKind::Report => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::DecisionInput => "decision_input",
            RecordKind::SensorReading => "sensor_reading",
            RecordKind::ActionLog => "action_log",
            RecordKind::TaskAssignment => "task_assignment",
            RecordKind::CooperationOutcome => "cooperation_outcome",
            RecordKind::CoalitionEvent => "coalition_event",
            RecordKind::Report => "report",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecordKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RecordKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown record kind {s:?}"))
    }
}

/// Key-value payload with a canonical byte encoding.
///
/// Encoding: for every entry in ascending key order,
/// `u32be(len(key)) ‖ key ‖ u32be(len(value)) ‖ value`. Keys are unique and
/// both keys and values are UTF-8.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Payload(BTreeMap<String, String>);

impl Payload {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.0.insert(key.into(), value.to_string());
        self
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Option<T> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, v) in &self.0 {
            put_bytes(&mut out, k.as_bytes());
            put_bytes(&mut out, v.as_bytes());
        }
        out
    }

    /// Strict decoding: rejects truncation, trailing bytes, unsorted or
    /// duplicate keys and invalid UTF-8, so `decode(b).encode() == b`.
    pub fn decode(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut map = BTreeMap::new();
        let mut rest = bytes;
        let mut last: Option<String> = None;
        while !rest.is_empty() {
            let (k, r) = take_bytes(rest)?;
            let (v, r) = take_bytes(r)?;
            rest = r;
            let k = String::from_utf8(k.to_vec())
                .map_err(|_| LedgerError::MalformedPayload("key is not UTF-8".into()))?;
            let v = String::from_utf8(v.to_vec())
                .map_err(|_| LedgerError::MalformedPayload("value is not UTF-8".into()))?;
            if let Some(prev) = &last {
                if *prev >= k {
                    return Err(LedgerError::MalformedPayload(format!(
                        "key {k:?} out of order after {prev:?}"
                    )));
                }
            }
            last = Some(k.clone());
            map.insert(k, v);
        }
        Ok(Payload(map))
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

fn take_bytes(input: &[u8]) -> Result<(&[u8], &[u8]), LedgerError> {
    if input.len() < 4 {
        return Err(LedgerError::MalformedPayload("truncated length prefix".into()));
    }
    let len = u32::from_be_bytes([input[0], input[1], input[2], input[3]]) as usize;
    let body = &input[4..];
    if body.len() < len {
        return Err(LedgerError::MalformedPayload("truncated field".into()));
    }
    Ok(body.split_at(len))
}

/// One signed agent event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorRecord {
    pub record_id: Hash32,
    pub agent_id: String,
    pub epoch: u64,
    pub kind: RecordKind,
    pub payload: Vec<u8>,
    pub timestamp: u64,
    pub signature: Vec<u8>,
}

impl BehaviorRecord {
    /// Build, sign and hash a record.
    pub fn signed(
        key: &SigningKey,
        agent_id: impl Into<String>,
        epoch: u64,
        kind: RecordKind,
        payload: &Payload,
        timestamp: u64,
    ) -> Self {
        let mut record = BehaviorRecord {
            record_id: Hash32::ZERO,
            agent_id: agent_id.into(),
            epoch,
            kind,
            payload: payload.encode(),
            timestamp,
            signature: Vec::new(),
        };
        let sig: Signature = key.sign(&record.signing_bytes());
        record.signature = sig.to_bytes().to_vec();
        record.record_id = record.compute_id();
        record
    }

    /// Bytes covered by the signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.agent_id.len() + self.payload.len());
        out.extend_from_slice(RECORD_DOMAIN);
        put_bytes(&mut out, self.agent_id.as_bytes());
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out.push(self.kind.tag());
        put_bytes(&mut out, &self.payload);
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out
    }

    /// Canonical serialization of every field except `record_id`.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = self.signing_bytes();
        put_bytes(&mut out, &self.signature);
        out
    }

    pub fn compute_id(&self) -> Hash32 {
        Hash32::digest(&self.canonical_bytes())
    }

    pub fn verify_signature(&self, key: &VerifyingKey) -> bool {
        match Signature::from_slice(&self.signature) {
            Ok(sig) => key.verify(&self.signing_bytes(), &sig).is_ok(),
            Err(_) => false,
        }
    }

    pub fn decoded_payload(&self) -> Result<Payload, LedgerError> {
        Payload::decode(&self.payload)
    }
}
