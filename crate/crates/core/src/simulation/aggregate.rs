//! Collective decisions over agent answers, and detection scoring.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SimulationError;
use crate::forecasting::DetectionMetrics;
use crate::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    NonCooperative,
    KCluster,
    #[default]
    ReputationWeighted,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 3] = [
        AggregationMode::NonCooperative,
        AggregationMode::KCluster,
        AggregationMode::ReputationWeighted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::NonCooperative => "non_cooperative",
            AggregationMode::KCluster => "k_cluster",
            AggregationMode::ReputationWeighted => "reputation_weighted",
        }
    }
}

/// Seeded random partition of `agents` into `k` clusters of near-equal size.
pub fn partition(agents: &[AgentId], k: usize, rng: &mut impl Rng) -> Vec<BTreeSet<AgentId>> {
    let mut shuffled = agents.to_vec();
    shuffled.shuffle(rng);
    let k = k.clamp(1, agents.len().max(1));
    let mut out = vec![BTreeSet::new(); k];
    for (i, a) in shuffled.into_iter().enumerate() {
        out[i % k].insert(a);
    }
    out
}

/// Argmax of total weight per answer. Ties go to the answer whose lowest
/// supporter id is smallest. Returns the winner and that supporter.
fn weighted_vote<A: Ord + Clone>(votes: &[(&AgentId, &A, f64)]) -> Option<(A, AgentId)> {
    let mut tally: BTreeMap<&A, (f64, &AgentId)> = BTreeMap::new();
    for (agent, answer, w) in votes {
        let e = tally.entry(*answer).or_insert((0.0, *agent));
        e.0 += w;
        if *agent < e.1 {
            e.1 = agent;
        }
    }
    tally
        .into_iter()
        .max_by(|(_, (wa, ia)), (_, (wb, ib))| wa.total_cmp(wb).then_with(|| ib.cmp(ia)))
        .map(|(a, (_, id))| (a.clone(), id.clone()))
}

/// State the randomized modes need.
#[derive(Debug, Clone)]
pub struct AggregationContext<R> {
    pub clusters: Vec<BTreeSet<AgentId>>,
    pub rng: R,
}

/// Collective answer under `mode`. Agents missing from `reputations` weigh 0.
pub fn aggregate_answers<A: Ord + Clone, R: Rng>(
    answers: &BTreeMap<AgentId, A>,
    reputations: &BTreeMap<AgentId, f64>,
    mode: AggregationMode,
    ctx: &mut AggregationContext<R>,
) -> Result<A, SimulationError> {
    if answers.is_empty() {
        return Err(SimulationError::NoAnswers);
    }
    let decision = match mode {
        AggregationMode::NonCooperative => {
            let i = ctx.rng.random_range(0..answers.len());
            answers.values().nth(i).cloned()
        }
        AggregationMode::KCluster => {
            let mut outputs = Vec::new();
            for cluster in &ctx.clusters {
                let votes: Vec<_> = answers
                    .iter()
                    .filter(|(a, _)| cluster.contains(*a))
                    .map(|(a, v)| (a, v, 1.0))
                    .collect();
                outputs.extend(weighted_vote(&votes));
            }
            // agents outside every cluster vote as singletons
            for (a, v) in answers {
                if !ctx.clusters.iter().any(|c| c.contains(a)) {
                    outputs.push((v.clone(), a.clone()));
                }
            }
            let votes: Vec<_> = outputs.iter().map(|(v, a)| (a, v, 1.0)).collect();
            weighted_vote(&votes).map(|(v, _)| v)
        }
        AggregationMode::ReputationWeighted => {
            let votes: Vec<_> = answers
                .iter()
                .map(|(a, v)| (a, v, reputations.get(a).copied().unwrap_or(0.0)))
                .collect();
            weighted_vote(&votes).map(|(v, _)| v)
        }
    };
    Ok(decision.expect("non-empty answers"))
}

pub type AgentEpoch = (AgentId, u64);

/// Confusion-matrix metrics of `alerted` against per-agent-epoch ground
/// truth. Every alert needs a label.
pub fn evaluate_detection(
    alerted: &BTreeSet<AgentEpoch>,
    labels: &BTreeMap<AgentEpoch, bool>,
) -> Result<DetectionMetrics, SimulationError> {
    if let Some(k) = alerted.iter().find(|k| !labels.contains_key(*k)) {
        return Err(SimulationError::LabelMismatch(k.0.clone(), k.1));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (k, positive) in labels {
        match (alerted.contains(k), *positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(DetectionMetrics::from_counts(tp, fp, fn_, tn))
}
