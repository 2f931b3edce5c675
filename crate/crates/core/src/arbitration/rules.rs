//! Regulatory rule predicates evaluated against dispute evidence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AgentAccount, ClaimKind};
use crate::ledger::{BehaviorRecord, Payload, RecordKind};

/// Payload keys the built-in rules read.
pub mod keys {
    pub const TASK_ID: &str = "task_id";
    pub const TASK_TYPE: &str = "task_type";
    pub const SUBJECT: &str = "subject";
    pub const COMPLETION_TICK: &str = "completion_tick";
    pub const DEADLINE_TICK: &str = "deadline_tick";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleVerdict {
    pub rule: String,
    pub violated: bool,
}

pub trait EvidenceRule: Send + Sync {
    fn name(&self) -> &'static str;
    fn claim_kind(&self) -> ClaimKind;
    /// `evidence` holds (record, decoded payload) pairs in dispute order.
    fn violated(&self, respondent: &AgentAccount, evidence: &[(&BehaviorRecord, Payload)]) -> bool;
}

/// R1: a task assignment accepted by the respondent names a task type outside
/// its declared capabilities.
pub struct CapabilityRange;

impl EvidenceRule for CapabilityRange {
    fn name(&self) -> &'static str {
        "capability_range"
    }

    fn claim_kind(&self) -> ClaimKind {
        ClaimKind::CapabilityViolation
    }

    fn violated(&self, respondent: &AgentAccount, evidence: &[(&BehaviorRecord, Payload)]) -> bool {
        evidence.iter().any(|(r, p)| {
            r.kind == RecordKind::TaskAssignment
                && r.agent_id == respondent.agent_id
                && p.get(keys::TASK_TYPE)
                    .is_some_and(|t| !respondent.declared_capabilities.contains(t))
        })
    }
}

/// R2: a cooperation outcome completed after its deadline.
pub struct Deadline;

impl EvidenceRule for Deadline {
    fn name(&self) -> &'static str {
        "deadline"
    }

    fn claim_kind(&self) -> ClaimKind {
        ClaimKind::DeadlineViolation
    }

    fn violated(&self, respondent: &AgentAccount, evidence: &[(&BehaviorRecord, Payload)]) -> bool {
        evidence.iter().any(|(r, p)| {
            r.kind == RecordKind::CooperationOutcome
                && r.agent_id == respondent.agent_id
                && matches!(
                    (p.get_parsed::<u64>(keys::COMPLETION_TICK), p.get_parsed::<u64>(keys::DEADLINE_TICK)),
                    (Some(done), Some(deadline)) if done > deadline
                )
        })
    }
}

/// R3: two records signed by the respondent in the same epoch and the same
/// claim scope assign different values to one payload key.
///
/// The scope is the pair of `task_id` and `subject` values (either may be
/// absent), so a report about agent A and a report about agent B on the same
/// task are not compared.
pub struct Contradiction;

impl EvidenceRule for Contradiction {
    fn name(&self) -> &'static str {
        "contradiction"
    }

    fn claim_kind(&self) -> ClaimKind {
        ClaimKind::Contradiction
    }

    fn violated(&self, respondent: &AgentAccount, evidence: &[(&BehaviorRecord, Payload)]) -> bool {
        type Scope<'a> = (u64, Option<&'a str>, Option<&'a str>);
        let mut seen: BTreeMap<(Scope<'_>, &str), &str> = BTreeMap::new();
        for (r, p) in evidence {
            if r.agent_id != respondent.agent_id {
                continue;
            }
            let scope = (r.epoch, p.get(keys::TASK_ID), p.get(keys::SUBJECT));
            for (k, v) in p.iter() {
                match seen.get(&(scope, k)) {
                    Some(prev) if *prev != v => return true,
                    Some(_) => {}
                    None => {
                        seen.insert((scope, k), v);
                    }
                }
            }
        }
        false
    }
}

/// Ordered set of rules; verdicts come back in registration order.
pub struct RuleRegistry {
    rules: Vec<Box<dyn EvidenceRule>>,
}

impl Default for RuleRegistry {
    fn default() -> Self {
        RuleRegistry {
            rules: vec![Box::new(CapabilityRange), Box::new(Deadline), Box::new(Contradiction)],
        }
    }
}

impl std::fmt::Debug for RuleRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.rules.iter().map(|r| r.name())).finish()
    }
}

impl RuleRegistry {
    pub fn register(&mut self, rule: Box<dyn EvidenceRule>) {
        self.rules.push(rule);
    }

    pub fn evaluate(&self, respondent: &AgentAccount, evidence: &[(&BehaviorRecord, Payload)]) -> Vec<RuleVerdict> {
        self.rules
            .iter()
            .map(|r| RuleVerdict {
                rule: r.name().to_string(),
                violated: r.violated(respondent, evidence),
            })
            .collect()
    }

    /// Claim kind of the first rule that fires, if any.
    pub fn suggest_claim(&self, respondent: &AgentAccount, evidence: &[(&BehaviorRecord, Payload)]) -> Option<ClaimKind> {
        self.rules
            .iter()
            .find(|r| r.violated(respondent, evidence))
            .map(|r| r.claim_kind())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arbitration::Privilege;
    use crate::keys::derive_signing_key;
    use std::collections::BTreeSet;

    fn account(caps: &[&str]) -> AgentAccount {
        AgentAccount {
            agent_id: "r".into(),
            public_key: [0; 32],
            stake: 100,
            privileges: Privilege::Active,
            strikes: 0,
            report_strikes: 0,
            declared_capabilities: caps.iter().map(|c| c.to_string()).collect::<BTreeSet<_>>(),
            monitored: false,
            restricted_through: None,
            suspended_through: None,
        }
    }

    fn rec(kind: RecordKind, epoch: u64, p: Payload) -> (BehaviorRecord, Payload) {
        let k = derive_signing_key(0, "r");
        (BehaviorRecord::signed(&k, "r", epoch, kind, &p, 0), p)
    }

    fn eval(rule: &dyn EvidenceRule, caps: &[&str], ev: &[(BehaviorRecord, Payload)]) -> bool {
        let refs: Vec<_> = ev.iter().map(|(r, p)| (r, p.clone())).collect();
        rule.violated(&account(caps), &refs)
    }

    #[test]
    fn capability_outside_declared_set() {
        let ev = [rec(RecordKind::TaskAssignment, 0, Payload::new().with("task_type", "nav"))];
        assert!(eval(&CapabilityRange, &["vision"], &ev));
        assert!(!eval(&CapabilityRange, &["vision", "nav"], &ev));
    }

    #[test]
    fn late_completion() {
        let late = Payload::new().with("completion_tick", 105).with("deadline_tick", 100);
        assert!(eval(&Deadline, &[], &[rec(RecordKind::CooperationOutcome, 0, late)]));
        let on_time = Payload::new().with("completion_tick", 100).with("deadline_tick", 100);
        assert!(!eval(&Deadline, &[], &[rec(RecordKind::CooperationOutcome, 0, on_time)]));
    }

    #[test]
    fn contradictory_plans_same_epoch() {
        let a = rec(RecordKind::DecisionInput, 4, Payload::new().with("plan", "A"));
        let b = rec(RecordKind::DecisionInput, 4, Payload::new().with("plan", "B"));
        assert!(eval(&Contradiction, &[], &[a.clone(), b]));
        let b_later = rec(RecordKind::DecisionInput, 5, Payload::new().with("plan", "B"));
        assert!(!eval(&Contradiction, &[], &[a, b_later]));
    }

    #[test]
    fn reports_on_different_subjects_do_not_contradict() {
        let a = rec(RecordKind::Report, 1, Payload::new().with("task_id", "t").with("subject", "x").with("value", 0.2));
        let b = rec(RecordKind::Report, 1, Payload::new().with("task_id", "t").with("subject", "y").with("value", 0.9));
        assert!(!eval(&Contradiction, &[], &[a, b]));
    }
}
