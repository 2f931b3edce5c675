//! Arbitration contract: staking, per-epoch submission obligations, slashing,
//! disputes and resolutions.
//!
//! The contract owns the [`Ledger`]. Every token movement is written to the
//! ledger as a `transfer` event signed by the contract key, so balances can be
//! replayed from the exported stream alone (see [`replay_tokens`]).

pub mod rules;

use std::collections::{BTreeMap, BTreeSet};

use ed25519_dalek::{SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keys::derive_signing_key;
use crate::ledger::{verify_proof, BehaviorRecord, Hash32, Ledger, LedgerError, Payload, RecordKind};
use crate::reputation::{EventSink, ReputationError, TokenBook};
use crate::AgentId;
pub use rules::{EvidenceRule, RuleRegistry, RuleVerdict};

/// Signer id of the contract itself.
pub const CONTRACT_ID: &str = "asc";

/// Pseudo-accounts used in `transfer` events.
pub const SINK: &str = "sink";
pub const MINT: &str = "mint";
pub const DEPOSIT: &str = "deposit";

#[derive(Debug, Error)]
pub enum ArbitrationError {
    #[error("agent {0} already registered")]
    DuplicateAgent(AgentId),
    #[error("stake {stake} below minimum {minimum}")]
    InsufficientStake { stake: u64, minimum: u64 },
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("agent {0} is suspended")]
    SuspendedAgent(AgentId),
    #[error("record for epoch {got}, current epoch is {expected}")]
    WrongEpoch { expected: u64, got: u64 },
    #[error("epoch {0} already closed")]
    EpochAlreadyClosed(u64),
    #[error("record signed as {signer} submitted by {submitter}")]
    SignerMismatch { submitter: AgentId, signer: AgentId },
    #[error("evidence {0} not on the ledger")]
    UnknownEvidence(Hash32),
    #[error("no dispute {0}")]
    UnknownDispute(u64),
    #[error("dispute {0} is not open")]
    DisputeNotOpen(u64),
    #[error("dispute {0} has not been evaluated")]
    DisputeNotEvaluated(u64),
    #[error("evidence {0} has no valid inclusion proof")]
    EvidenceProofInvalid(Hash32),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArbitrationParams {
    pub min_stake: u64,
    /// Fraction of stake slashed for a missing submission, rounded down.
    pub slash_rate: f64,
    pub verdict_penalty: u64,
    pub frivolous_fee: u64,
    /// Suspension for a first offense; doubles with each prior strike.
    pub base_suspension_epochs: u64,
    /// How long a missing submission or a forecasting alert restricts.
    pub restriction_epochs: u64,
}

impl Default for ArbitrationParams {
    fn default() -> Self {
        ArbitrationParams {
            min_stake: 100,
            slash_rate: 0.1,
            verdict_penalty: 5,
            frivolous_fee: 1,
            base_suspension_epochs: 1,
            restriction_epochs: 1,
        }
    }
}

impl ArbitrationParams {
    /// Slash rate in basis points, so slashing is exact integer arithmetic.
    pub fn slash_bps(&self) -> u64 {
        (self.slash_rate.clamp(0.0, 1.0) * 10_000.0).round() as u64
    }

    pub fn slash_amount(&self, stake: u64) -> u64 {
        (stake as u128 * self.slash_bps() as u128 / 10_000) as u64
    }

    pub fn suspension_for(&self, prior_strikes: u32) -> u64 {
        self.base_suspension_epochs
            .saturating_mul(1u64.checked_shl(prior_strikes).unwrap_or(u64::MAX))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Privilege {
    Active,
    Restricted,
    Suspended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimKind {
    CapabilityViolation,
    DeadlineViolation,
    Contradiction,
}

impl ClaimKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClaimKind::CapabilityViolation => "capability_violation",
            ClaimKind::DeadlineViolation => "deadline_violation",
            ClaimKind::Contradiction => "contradiction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAccount {
    pub agent_id: AgentId,
    #[serde(with = "hex_key")]
    pub public_key: [u8; 32],
    pub stake: u64,
    pub privileges: Privilege,
    /// Upheld disputes against this agent.
    pub strikes: u32,
    /// Dishonest reports flagged by report rounds.
    pub report_strikes: u32,
    pub declared_capabilities: BTreeSet<String>,
    pub monitored: bool,
    pub restricted_through: Option<u64>,
    pub suspended_through: Option<u64>,
}

mod hex_key {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(k))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub record_id: Hash32,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub submitted: BTreeSet<AgentId>,
    pub missing: BTreeSet<AgentId>,
    pub slashes: BTreeMap<AgentId, u64>,
    pub revocations: BTreeSet<AgentId>,
    pub record_id: Hash32,
    pub block_height: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisputeStatus {
    Open,
    Evaluated,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispute {
    pub dispute_id: u64,
    pub epoch: u64,
    pub claimant: AgentId,
    pub respondent: AgentId,
    pub claim_kind: ClaimKind,
    pub evidence_record_ids: Vec<Hash32>,
    pub status: DisputeStatus,
    pub verdicts: Vec<RuleVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub dispute_id: u64,
    pub verdicts: Vec<RuleVerdict>,
    pub penalty_tokens: u64,
    pub suspension_epochs: u64,
    pub redistribution: BTreeMap<AgentId, u64>,
    pub flagged: bool,
    pub claimant_fee: u64,
    pub record_id: Hash32,
}

impl Resolution {
    pub fn upheld(&self) -> bool {
        self.verdicts.iter().any(|v| v.violated)
    }
}

/// Token totals. Conservation means
/// `Σ stakes + sink == deposited + minted`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TokenAudit {
    pub stakes: BTreeMap<AgentId, u64>,
    pub deposited: u64,
    pub minted: u64,
    pub sink: u64,
}

impl TokenAudit {
    pub fn total_stake(&self) -> u64 {
        self.stakes.values().sum()
    }

    pub fn conserved(&self) -> bool {
        self.total_stake() as u128 + self.sink as u128 == self.deposited as u128 + self.minted as u128
    }
}

/// Rebuild token balances from the contract's `registration` and `transfer`
/// events. Records not signed by the contract are ignored.
pub fn replay_tokens(ledger: &Ledger) -> Result<TokenAudit, LedgerError> {
    let mut audit = TokenAudit::default();
    let bad = |what: &str| LedgerError::MalformedPayload(format!("token event: {what}"));
    for r in ledger.records().filter(|r| r.agent_id == CONTRACT_ID) {
        let p = r.decoded_payload()?;
        match p.get("event") {
            Some("registration") => {
                let agent = p.get("agent").ok_or_else(|| bad("agent"))?;
                let stake: u64 = p.get_parsed("stake").ok_or_else(|| bad("stake"))?;
                audit.stakes.insert(agent.to_string(), stake);
                audit.deposited += stake;
            }
            Some("transfer") => {
                let from = p.get("from").ok_or_else(|| bad("from"))?;
                let to = p.get("to").ok_or_else(|| bad("to"))?;
                let tokens: u64 = p.get_parsed("tokens").ok_or_else(|| bad("tokens"))?;
                match from {
                    MINT => audit.minted += tokens,
                    SINK => audit.sink = audit.sink.checked_sub(tokens).ok_or_else(|| bad("sink underflow"))?,
                    a => {
                        let s = audit.stakes.get_mut(a).ok_or_else(|| bad("unknown sender"))?;
                        *s = s.checked_sub(tokens).ok_or_else(|| bad("overdraft"))?;
                    }
                }
                match to {
                    SINK => audit.sink += tokens,
                    a => *audit.stakes.get_mut(a).ok_or_else(|| bad("unknown recipient"))? += tokens,
                }
            }
            _ => {}
        }
    }
    Ok(audit)
}

fn join_map(m: &BTreeMap<AgentId, u64>) -> String {
    m.iter().map(|(a, t)| format!("{a}={t}")).collect::<Vec<_>>().join(";")
}

fn join_set(s: &BTreeSet<AgentId>) -> String {
    s.iter().map(String::as_str).collect::<Vec<_>>().join(",")
}

/// The contract state machine. Single writer; callers serialize access.
#[derive(Debug)]
pub struct ArbitrationContract {
    params: ArbitrationParams,
    key: SigningKey,
    ledger: Ledger,
    accounts: BTreeMap<AgentId, AgentAccount>,
    epoch: u64,
    tick: u64,
    submitted: BTreeSet<AgentId>,
    disputes: BTreeMap<u64, Dispute>,
    rules: RuleRegistry,
    audit: TokenAudit,
}

impl ArbitrationContract {
    /// Contract key is derived from `seed`.
    pub fn new(params: ArbitrationParams, seed: u64) -> Self {
        let key = derive_signing_key(seed, CONTRACT_ID);
        let mut ledger = Ledger::new();
        ledger
            .register_key(CONTRACT_ID, key.verifying_key())
            .expect("fresh ledger");
        ArbitrationContract {
            params,
            key,
            ledger,
            accounts: BTreeMap::new(),
            epoch: 0,
            tick: 0,
            submitted: BTreeSet::new(),
            disputes: BTreeMap::new(),
            rules: RuleRegistry::default(),
            audit: TokenAudit::default(),
        }
    }

    pub fn params(&self) -> &ArbitrationParams {
        &self.params
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Raw ledger access for tamper experiments.
    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn into_ledger(self) -> Ledger {
        self.ledger
    }

    pub fn rules_mut(&mut self) -> &mut RuleRegistry {
        &mut self.rules
    }

    pub fn rules(&self) -> &RuleRegistry {
        &self.rules
    }

    pub fn current_epoch(&self) -> u64 {
        self.epoch
    }

    /// Monotone logical clock used as record timestamp.
    pub fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    pub fn account(&self, agent: &str) -> Option<&AgentAccount> {
        self.accounts.get(agent)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &AgentAccount> {
        self.accounts.values()
    }

    pub fn privileges(&self, agent: &str) -> Option<Privilege> {
        self.accounts.get(agent).map(|a| a.privileges)
    }

    pub fn dispute(&self, id: u64) -> Option<&Dispute> {
        self.disputes.get(&id)
    }

    pub fn disputes(&self) -> impl Iterator<Item = &Dispute> {
        self.disputes.values()
    }

    pub fn has_submitted(&self, agent: &str) -> bool {
        self.submitted.contains(agent)
    }

    /// Balances as tracked live.
    pub fn token_audit(&self) -> TokenAudit {
        let mut a = self.audit.clone();
        a.stakes = self.accounts.values().map(|x| (x.agent_id.clone(), x.stake)).collect();
        a
    }

    fn emit_event(&mut self, kind: RecordKind, payload: Payload) -> Result<Hash32, LedgerError> {
        let ts = self.next_tick();
        let rec = BehaviorRecord::signed(&self.key, CONTRACT_ID, self.epoch, kind, &payload, ts);
        self.ledger.append_record(rec)
    }

    fn transfer(&mut self, from: &str, to: &str, tokens: u64, reason: &str) -> Result<(), LedgerError> {
        if tokens == 0 {
            return Ok(());
        }
        for (who, sign) in [(from, -1i8), (to, 1)] {
            match who {
                MINT => self.audit.minted += tokens,
                SINK if sign < 0 => self.audit.sink -= tokens,
                SINK => self.audit.sink += tokens,
                a => {
                    let acct = self.accounts.get_mut(a).expect("caller checked account");
                    if sign < 0 {
                        acct.stake -= tokens;
                    } else {
                        acct.stake += tokens;
                    }
                }
            }
        }
        let p = Payload::new()
            .with("event", "transfer")
            .with("from", from)
            .with("to", to)
            .with("tokens", tokens)
            .with("reason", reason);
        self.emit_event(RecordKind::ActionLog, p)?;
        Ok(())
    }

    pub fn register_agent(
        &mut self,
        agent_id: &str,
        public_key: VerifyingKey,
        stake: u64,
        capabilities: BTreeSet<String>,
    ) -> Result<&AgentAccount, ArbitrationError> {
        if self.accounts.contains_key(agent_id) || agent_id == CONTRACT_ID || [SINK, MINT, DEPOSIT].contains(&agent_id) {
            return Err(ArbitrationError::DuplicateAgent(agent_id.to_string()));
        }
        if stake < self.params.min_stake {
            return Err(ArbitrationError::InsufficientStake {
                stake,
                minimum: self.params.min_stake,
            });
        }
        self.ledger.register_key(agent_id, public_key)?;
        let p = Payload::new()
            .with("event", "registration")
            .with("agent", agent_id)
            .with("stake", stake)
            .with("capabilities", join_set(&capabilities))
            .with("public_key", hex::encode(public_key.as_bytes()));
        self.emit_event(RecordKind::ActionLog, p)?;
        self.audit.deposited += stake;
        self.accounts.insert(
            agent_id.to_string(),
            AgentAccount {
                agent_id: agent_id.to_string(),
                public_key: *public_key.as_bytes(),
                stake,
                privileges: Privilege::Active,
                strikes: 0,
                report_strikes: 0,
                declared_capabilities: capabilities,
                monitored: false,
                restricted_through: None,
                suspended_through: None,
            },
        );
        Ok(&self.accounts[agent_id])
    }

    pub fn submit_behavior(
        &mut self,
        agent_id: &str,
        epoch: u64,
        record: BehaviorRecord,
    ) -> Result<Receipt, ArbitrationError> {
        let acct = self
            .accounts
            .get(agent_id)
            .ok_or_else(|| ArbitrationError::UnknownAgent(agent_id.to_string()))?;
        if acct.privileges == Privilege::Suspended {
            return Err(ArbitrationError::SuspendedAgent(agent_id.to_string()));
        }
        for got in [epoch, record.epoch] {
            if got != self.epoch {
                return Err(ArbitrationError::WrongEpoch { expected: self.epoch, got });
            }
        }
        if record.agent_id != agent_id {
            return Err(ArbitrationError::SignerMismatch {
                submitter: agent_id.to_string(),
                signer: record.agent_id,
            });
        }
        let record_id = self.ledger.append_record(record)?;
        self.submitted.insert(agent_id.to_string());
        Ok(Receipt { record_id, epoch })
    }

    /// Agents obliged to submit this epoch: everyone not suspended.
    fn obligated(&self) -> impl Iterator<Item = &AgentAccount> {
        self.accounts.values().filter(|a| a.privileges != Privilege::Suspended)
    }

    pub fn close_epoch(&mut self, epoch: u64) -> Result<EpochReport, ArbitrationError> {
        if epoch < self.epoch {
            return Err(ArbitrationError::EpochAlreadyClosed(epoch));
        }
        if epoch > self.epoch {
            return Err(ArbitrationError::WrongEpoch { expected: self.epoch, got: epoch });
        }
        let obligated: BTreeSet<AgentId> = self.obligated().map(|a| a.agent_id.clone()).collect();
        let submitted: BTreeSet<AgentId> = obligated.intersection(&self.submitted).cloned().collect();
        let missing: BTreeSet<AgentId> = obligated.difference(&submitted).cloned().collect();
        let mut slashes = BTreeMap::new();
        let through = epoch + self.params.restriction_epochs;
        for agent in &missing {
            let amount = self.params.slash_amount(self.accounts[agent].stake);
            self.transfer(agent, SINK, amount, "missing_submission")?;
            slashes.insert(agent.clone(), amount);
            let acct = self.accounts.get_mut(agent).expect("obligated");
            acct.restricted_through = Some(acct.restricted_through.map_or(through, |t| t.max(through)));
        }
        let p = Payload::new()
            .with("event", "epoch_report")
            .with("epoch", epoch)
            .with("submitted", join_set(&submitted))
            .with("missing", join_set(&missing))
            .with("slashes", join_map(&slashes))
            .with("revocations", join_set(&missing));
        let record_id = self.emit_event(RecordKind::ActionLog, p)?;
        let block_height = self.ledger.seal_block(epoch)?.height;
        self.epoch += 1;
        self.submitted.clear();
        self.refresh_privileges();
        Ok(EpochReport {
            epoch,
            submitted,
            revocations: missing.clone(),
            missing,
            slashes,
            record_id,
            block_height,
        })
    }

    fn refresh_privileges(&mut self) {
        let e = self.epoch;
        for a in self.accounts.values_mut() {
            a.privileges = if a.suspended_through.is_some_and(|t| t >= e) {
                Privilege::Suspended
            } else if a.restricted_through.is_some_and(|t| t >= e) {
                Privilege::Restricted
            } else {
                Privilege::Active
            };
        }
    }

    /// Restrict `agent` for the current epoch and the next
    /// `restriction_epochs`. Used by forecasting alerts.
    pub fn restrict(&mut self, agent: &str, reason: &str) -> Result<(), ArbitrationError> {
        let through = self.epoch + self.params.restriction_epochs;
        let acct = self
            .accounts
            .get_mut(agent)
            .ok_or_else(|| ArbitrationError::UnknownAgent(agent.to_string()))?;
        acct.restricted_through = Some(acct.restricted_through.map_or(through, |t| t.max(through)));
        if acct.privileges == Privilege::Active {
            acct.privileges = Privilege::Restricted;
        }
        let p = Payload::new()
            .with("event", "restriction")
            .with("agent", agent)
            .with("through_epoch", through)
            .with("reason", reason);
        self.emit_event(RecordKind::ActionLog, p)?;
        Ok(())
    }

    fn known_party(&self, agent: &str) -> Result<(), ArbitrationError> {
        if agent == CONTRACT_ID || self.accounts.contains_key(agent) {
            Ok(())
        } else {
            Err(ArbitrationError::UnknownAgent(agent.to_string()))
        }
    }

    /// `claimant` may be [`CONTRACT_ID`] for contract-initiated disputes.
    pub fn open_dispute(
        &mut self,
        claimant: &str,
        respondent: &str,
        claim_kind: ClaimKind,
        evidence_record_ids: Vec<Hash32>,
    ) -> Result<&Dispute, ArbitrationError> {
        self.known_party(claimant)?;
        if !self.accounts.contains_key(respondent) {
            return Err(ArbitrationError::UnknownAgent(respondent.to_string()));
        }
        if let Some(missing) = evidence_record_ids.iter().find(|id| !self.ledger.contains(id)) {
            return Err(ArbitrationError::UnknownEvidence(*missing));
        }
        let dispute_id = self.disputes.len() as u64;
        let p = Payload::new()
            .with("event", "dispute_opened")
            .with("dispute_id", dispute_id)
            .with("claimant", claimant)
            .with("respondent", respondent)
            .with("claim_kind", claim_kind.as_str())
            .with(
                "evidence",
                evidence_record_ids.iter().map(Hash32::to_hex).collect::<Vec<_>>().join(","),
            );
        self.emit_event(RecordKind::ActionLog, p)?;
        self.disputes.insert(
            dispute_id,
            Dispute {
                dispute_id,
                epoch: self.epoch,
                claimant: claimant.to_string(),
                respondent: respondent.to_string(),
                claim_kind,
                evidence_record_ids,
                status: DisputeStatus::Open,
                verdicts: Vec::new(),
            },
        );
        Ok(&self.disputes[&dispute_id])
    }

    /// Evidence records with their decoded payloads, each checked against
    /// its block's Merkle root and recomputed id.
    fn proven_evidence(&self, ids: &[Hash32]) -> Result<Vec<(&BehaviorRecord, Payload)>, ArbitrationError> {
        ids.iter()
            .map(|id| {
                let invalid = || ArbitrationError::EvidenceProofInvalid(*id);
                let record = self.ledger.get(id).ok_or(ArbitrationError::UnknownEvidence(*id))?;
                let block = self.ledger.block_of(id).ok_or_else(invalid)?;
                let proof = self.ledger.prove_inclusion(id).map_err(|_| invalid())?;
                if record.compute_id() != *id || !verify_proof(id, &proof, &block.merkle_root) {
                    return Err(invalid());
                }
                let payload = record.decoded_payload().map_err(|_| invalid())?;
                Ok((record, payload))
            })
            .collect()
    }

    /// Rule that would fire first on this evidence, without opening anything.
    pub fn suggest_claim(&self, respondent: &str, evidence: &[Hash32]) -> Result<Option<ClaimKind>, ArbitrationError> {
        let acct = self
            .accounts
            .get(respondent)
            .ok_or_else(|| ArbitrationError::UnknownAgent(respondent.to_string()))?;
        let ev = self.proven_evidence(evidence)?;
        Ok(self.rules.suggest_claim(acct, &ev))
    }

    pub fn evaluate_evidence(&mut self, dispute_id: u64) -> Result<Vec<RuleVerdict>, ArbitrationError> {
        let d = self
            .disputes
            .get(&dispute_id)
            .ok_or(ArbitrationError::UnknownDispute(dispute_id))?;
        if d.status != DisputeStatus::Open {
            return Err(ArbitrationError::DisputeNotOpen(dispute_id));
        }
        let ev = self.proven_evidence(&d.evidence_record_ids)?;
        let verdicts = self.rules.evaluate(&self.accounts[&d.respondent], &ev);
        let p = Payload::new()
            .with("event", "dispute_evaluated")
            .with("dispute_id", dispute_id)
            .with(
                "verdicts",
                verdicts
                    .iter()
                    .map(|v| format!("{}={}", v.rule, v.violated))
                    .collect::<Vec<_>>()
                    .join(";"),
            );
        self.emit_event(RecordKind::ActionLog, p)?;
        let d = self.disputes.get_mut(&dispute_id).expect("checked");
        d.status = DisputeStatus::Evaluated;
        d.verdicts = verdicts.clone();
        Ok(verdicts)
    }

    pub fn resolve_dispute(&mut self, dispute_id: u64) -> Result<Resolution, ArbitrationError> {
        let d = self
            .disputes
            .get(&dispute_id)
            .ok_or(ArbitrationError::UnknownDispute(dispute_id))?
            .clone();
        if d.status != DisputeStatus::Evaluated {
            return Err(ArbitrationError::DisputeNotEvaluated(dispute_id));
        }
        let upheld = d.verdicts.iter().filter(|v| v.violated).count() as u64;
        let mut redistribution = BTreeMap::new();
        let (mut penalty, mut suspension, mut fee) = (0, 0, 0);
        if upheld > 0 {
            let resp = &self.accounts[&d.respondent];
            penalty = (self.params.verdict_penalty * upheld).min(resp.stake);
            suspension = self.params.suspension_for(resp.strikes);
            let recipients: Vec<AgentId> = self
                .accounts
                .keys()
                .filter(|a| **a != d.respondent)
                .cloned()
                .collect();
            if recipients.is_empty() {
                self.transfer(&d.respondent, SINK, penalty, "verdict_penalty")?;
            } else {
                let share = penalty / recipients.len() as u64;
                let remainder = penalty % recipients.len() as u64;
                for (i, r) in recipients.iter().enumerate() {
                    let amount = share + if i == 0 { remainder } else { 0 };
                    if amount > 0 {
                        redistribution.insert(r.clone(), amount);
                    }
                }
                for (r, amount) in &redistribution {
                    self.transfer(&d.respondent, r, *amount, "verdict_penalty")?;
                }
            }
            let through = self.epoch + suspension;
            let acct = self.accounts.get_mut(&d.respondent).expect("known");
            acct.strikes += 1;
            acct.monitored = true;
            if suspension > 0 {
                acct.suspended_through = Some(acct.suspended_through.map_or(through, |t| t.max(through)));
            }
        } else if d.claimant != CONTRACT_ID {
            fee = self.params.frivolous_fee.min(self.accounts[&d.claimant].stake);
            self.transfer(&d.claimant, SINK, fee, "frivolous_claim")?;
        }
        let p = Payload::new()
            .with("event", "resolution")
            .with("dispute_id", dispute_id)
            .with("respondent", &d.respondent)
            .with("upheld", upheld)
            .with("penalty_tokens", penalty)
            .with("suspension_epochs", suspension)
            .with("redistribution", join_map(&redistribution))
            .with("claimant_fee", fee);
        let record_id = self.emit_event(RecordKind::ActionLog, p)?;
        self.disputes.get_mut(&dispute_id).expect("known").status = DisputeStatus::Resolved;
        Ok(Resolution {
            dispute_id,
            verdicts: d.verdicts,
            penalty_tokens: penalty,
            suspension_epochs: suspension,
            redistribution,
            flagged: upheld > 0,
            claimant_fee: fee,
            record_id,
        })
    }

    /// Replay the ledger and compare with live balances.
    pub fn audit_matches_ledger(&self) -> Result<bool, LedgerError> {
        Ok(replay_tokens(&self.ledger)? == self.token_audit())
    }
}

impl TokenBook for ArbitrationContract {
    fn credit(&mut self, agent: &str, tokens: u64, reason: &str) -> Result<u64, ReputationError> {
        if !self.accounts.contains_key(agent) {
            return Err(ReputationError::UnknownAccount(agent.to_string()));
        }
        self.transfer(MINT, agent, tokens, reason)?;
        Ok(tokens)
    }

    fn debit(&mut self, agent: &str, tokens: u64, reason: &str) -> Result<u64, ReputationError> {
        let stake = self
            .accounts
            .get(agent)
            .ok_or_else(|| ReputationError::UnknownAccount(agent.to_string()))?
            .stake;
        let taken = tokens.min(stake);
        self.transfer(agent, SINK, taken, reason)?;
        Ok(taken)
    }

    fn add_strike(&mut self, agent: &str) -> Result<u32, ReputationError> {
        let acct = self
            .accounts
            .get_mut(agent)
            .ok_or_else(|| ReputationError::UnknownAccount(agent.to_string()))?;
        acct.report_strikes += 1;
        Ok(acct.report_strikes)
    }
}

impl EventSink for ArbitrationContract {
    fn emit(&mut self, kind: RecordKind, payload: Payload) -> Result<Option<Hash32>, LedgerError> {
        self.emit_event(kind, payload).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(name: &str) -> SigningKey {
        derive_signing_key(9, name)
    }

    fn contract(names: &[&str], stake: u64) -> ArbitrationContract {
        let mut c = ArbitrationContract::new(ArbitrationParams::default(), 9);
        for n in names {
            let caps = ["vision".to_string()].into_iter().collect();
            c.register_agent(n, key(n).verifying_key(), stake, caps).unwrap();
        }
        c
    }

    fn submit(c: &mut ArbitrationContract, agent: &str, kind: RecordKind, p: Payload) -> Hash32 {
        let ts = c.next_tick();
        let e = c.current_epoch();
        let rec = BehaviorRecord::signed(&key(agent), agent, e, kind, &p, ts);
        c.submit_behavior(agent, e, rec).unwrap().record_id
    }

    fn heartbeat(c: &mut ArbitrationContract, agent: &str) -> Hash32 {
        submit(c, agent, RecordKind::SensorReading, Payload::new().with("ok", 1))
    }

    #[test]
    fn registration_boundaries() {
        let mut c = contract(&[], 0);
        let a = c.register_agent("a", key("a").verifying_key(), 100, BTreeSet::new()).unwrap();
        assert_eq!((a.stake, a.privileges), (100, Privilege::Active));
        assert!(matches!(
            c.register_agent("b", key("b").verifying_key(), 99, BTreeSet::new()),
            Err(ArbitrationError::InsufficientStake { stake: 99, minimum: 100 })
        ));
        assert!(matches!(
            c.register_agent("a", key("a").verifying_key(), 100, BTreeSet::new()),
            Err(ArbitrationError::DuplicateAgent(_))
        ));
    }

    #[test]
    fn submission_preconditions() {
        let mut c = contract(&["a", "b"], 100);
        heartbeat(&mut c, "a");
        assert!(c.has_submitted("a"));
        let old = BehaviorRecord::signed(&key("a"), "a", 0, RecordKind::ActionLog, &Payload::new(), 50);
        heartbeat(&mut c, "b");
        c.close_epoch(0).unwrap();
        assert!(matches!(
            c.submit_behavior("a", 1, old),
            Err(ArbitrationError::WrongEpoch { expected: 1, got: 0 })
        ));
        let forged = BehaviorRecord::signed(&key("b"), "a", 1, RecordKind::ActionLog, &Payload::new(), 51);
        assert!(matches!(
            c.submit_behavior("a", 1, forged),
            Err(ArbitrationError::Ledger(LedgerError::InvalidSignature(_)))
        ));
        c.accounts.get_mut("b").unwrap().privileges = Privilege::Suspended;
        let rec = BehaviorRecord::signed(&key("b"), "b", 1, RecordKind::ActionLog, &Payload::new(), 52);
        assert!(matches!(c.submit_behavior("b", 1, rec), Err(ArbitrationError::SuspendedAgent(_))));
        assert!(matches!(c.close_epoch(0), Err(ArbitrationError::EpochAlreadyClosed(0))));
    }

    #[test]
    fn missing_submissions_are_slashed_and_restricted() {
        let names = ["a", "b", "c", "d", "e", "f", "g", "h"];
        let mut c = contract(&names, 100);
        for n in &names[2..] {
            heartbeat(&mut c, n);
        }
        let r = c.close_epoch(0).unwrap();
        assert_eq!(r.slashes, [("a".to_string(), 10), ("b".to_string(), 10)].into_iter().collect());
        assert_eq!(r.revocations, ["a", "b"].iter().map(|s| s.to_string()).collect());
        assert_eq!(r.submitted.len(), 6);
        assert_eq!(c.account("a").unwrap().stake, 90);
        assert_eq!(c.privileges("a"), Some(Privilege::Restricted));
        assert_eq!(c.privileges("c"), Some(Privilege::Active));
        assert!(c.ledger().verify_inclusion(&r.record_id));

        // everyone submits in epoch 1: restriction lapses in epoch 2
        for n in &names {
            heartbeat(&mut c, n);
        }
        let r1 = c.close_epoch(1).unwrap();
        assert!(r1.slashes.is_empty() && r1.revocations.is_empty());
        assert_eq!(c.privileges("a"), Some(Privilege::Active));
        assert!(c.token_audit().conserved());
        assert!(c.audit_matches_ledger().unwrap());
    }

    #[test]
    fn tiny_stake_floors_to_zero_but_is_revoked() {
        let mut c = contract(&["a"], 100);
        c.accounts.get_mut("a").unwrap().stake = 3;
        let r = c.close_epoch(0).unwrap();
        assert_eq!(r.slashes["a"], 0);
        assert!(r.revocations.contains("a"));
        assert_eq!(c.account("a").unwrap().stake, 3);
    }

    fn sealed_evidence(c: &mut ArbitrationContract) -> Vec<Hash32> {
        let a = submit(c, "r", RecordKind::DecisionInput, Payload::new().with("plan", "A"));
        let b = submit(c, "r", RecordKind::DecisionInput, Payload::new().with("plan", "B"));
        for n in ["a", "b", "c"] {
            heartbeat(c, n);
        }
        c.close_epoch(c.current_epoch()).unwrap();
        vec![a, b]
    }

    #[test]
    fn dispute_lifecycle_and_redistribution() {
        let mut c = contract(&["a", "b", "c", "r"], 100);
        let ev = sealed_evidence(&mut c);
        let d = c.open_dispute("a", "r", ClaimKind::Contradiction, ev).unwrap().dispute_id;
        assert!(matches!(c.resolve_dispute(d), Err(ArbitrationError::DisputeNotEvaluated(0))));
        let v = c.evaluate_evidence(d).unwrap();
        assert_eq!(v.iter().map(|v| v.violated).collect::<Vec<_>>(), [false, false, true]);
        assert!(matches!(c.evaluate_evidence(d), Err(ArbitrationError::DisputeNotOpen(0))));
        let res = c.resolve_dispute(d).unwrap();
        assert_eq!(res.penalty_tokens, 5);
        assert_eq!(
            res.redistribution,
            [("a".to_string(), 3), ("b".to_string(), 1), ("c".to_string(), 1)].into_iter().collect()
        );
        assert_eq!(res.suspension_epochs, 1);
        let r = c.account("r").unwrap();
        assert_eq!((r.stake, r.strikes, r.monitored), (95, 1, true));
        assert_eq!(c.account("a").unwrap().stake, 103);
        assert_eq!(c.dispute(d).unwrap().status, DisputeStatus::Resolved);

        // suspension applies to the next epoch only, and suspended agents are not slashed
        for n in ["a", "b", "c", "r"] {
            heartbeat(&mut c, n);
        }
        c.close_epoch(1).unwrap();
        assert_eq!(c.privileges("r"), Some(Privilege::Suspended));
        for n in ["a", "b", "c"] {
            heartbeat(&mut c, n);
        }
        let rep = c.close_epoch(2).unwrap();
        assert!(!rep.missing.contains("r") && rep.slashes.is_empty());
        assert_eq!(c.privileges("r"), Some(Privilege::Active));

        assert!(c.ledger().verify_inclusion(&res.record_id));
        assert!(c.audit_matches_ledger().unwrap());
        assert!(c.token_audit().conserved());
    }

    #[test]
    fn suspension_doubles_with_strikes() {
        let p = ArbitrationParams::default();
        assert_eq!([0, 1, 2, 3].map(|s| p.suspension_for(s)), [1, 2, 4, 8]);
    }

    #[test]
    fn frivolous_claim_costs_the_claimant() {
        let mut c = contract(&["a", "b", "c", "r"], 100);
        let ok = heartbeat(&mut c, "r");
        for n in ["a", "b", "c"] {
            heartbeat(&mut c, n);
        }
        c.close_epoch(0).unwrap();
        let d = c.open_dispute("a", "r", ClaimKind::DeadlineViolation, vec![ok]).unwrap().dispute_id;
        c.evaluate_evidence(d).unwrap();
        let res = c.resolve_dispute(d).unwrap();
        assert!(!res.flagged && res.penalty_tokens == 0 && res.claimant_fee == 1);
        assert_eq!(c.account("a").unwrap().stake, 99);
        assert_eq!(c.account("r").unwrap().stake, 100);
        assert!(!c.account("r").unwrap().monitored);
    }

    #[test]
    fn penalty_floors_at_stake() {
        let mut c = contract(&["a", "b", "c", "r"], 100);
        let late = submit(
            &mut c,
            "r",
            RecordKind::CooperationOutcome,
            Payload::new().with("completion_tick", 105).with("deadline_tick", 100),
        );
        let far = submit(&mut c, "r", RecordKind::TaskAssignment, Payload::new().with("task_type", "nav"));
        for n in ["a", "b", "c"] {
            heartbeat(&mut c, n);
        }
        c.close_epoch(0).unwrap();
        c.accounts.get_mut("r").unwrap().stake = 7;
        let d = c.open_dispute("b", "r", ClaimKind::DeadlineViolation, vec![late, far]).unwrap().dispute_id;
        let v = c.evaluate_evidence(d).unwrap();
        assert_eq!(v.iter().filter(|v| v.violated).count(), 2);
        let res = c.resolve_dispute(d).unwrap();
        assert_eq!(res.penalty_tokens, 7);
        assert_eq!(res.redistribution.values().sum::<u64>(), 7);
        assert_eq!(c.account("r").unwrap().stake, 0);
    }

    #[test]
    fn dispute_errors() {
        let mut c = contract(&["a", "r"], 100);
        let unsealed = heartbeat(&mut c, "r");
        assert!(matches!(
            c.open_dispute("a", "r", ClaimKind::Contradiction, vec![Hash32([7; 32])]),
            Err(ArbitrationError::UnknownEvidence(_))
        ));
        assert!(matches!(
            c.open_dispute("zed", "r", ClaimKind::Contradiction, vec![]),
            Err(ArbitrationError::UnknownAgent(_))
        ));
        let d = c.open_dispute("r", "r", ClaimKind::Contradiction, vec![unsealed]).unwrap().dispute_id;
        assert!(matches!(c.evaluate_evidence(d), Err(ArbitrationError::EvidenceProofInvalid(_))));
    }

    #[test]
    fn report_settlement_moves_tokens_through_the_ledger() {
        let mut c = contract(&["a", "b"], 100);
        assert_eq!(c.credit("a", 2, "honest_report").unwrap(), 2);
        assert_eq!(c.debit("b", 500, "dishonest_report").unwrap(), 100);
        assert_eq!(c.add_strike("b").unwrap(), 1);
        assert!(c.credit("zed", 1, "x").is_err());
        let audit = c.token_audit();
        assert_eq!((audit.minted, audit.sink, audit.total_stake()), (2, 100, 102));
        assert!(audit.conserved());
        assert_eq!(replay_tokens(c.ledger()).unwrap(), audit);
    }
}
